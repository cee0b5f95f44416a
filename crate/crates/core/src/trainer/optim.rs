//! Adam with the AMSGrad correction: the second-moment estimate used in the
//! update is the running maximum of the exponential average.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::nets::{Checkpoint, NetError, Param};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmsgradConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AmsgradConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    v_max: Tensor,
}

/// Per-parameter state is created lazily on the first step that sees a
/// gradient for that parameter; parameters without a gradient are skipped.
#[derive(Debug)]
pub struct Amsgrad {
    cfg: AmsgradConfig,
    step: u64,
    state: HashMap<String, Moments>,
}

const PREFIX: &str = "optim.";

impl Amsgrad {
    pub fn new(cfg: AmsgradConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &[Param], grads: &GradStore) -> candle_core::Result<()> {
        self.step += 1;
        let AmsgradConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        let t = self.step as i32;
        let bias1 = 1.0 - b1.powi(t);
        let bias2_sqrt = (1.0 - b2.powi(t)).sqrt();
        for p in params {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let st = match self.state.get(&p.name) {
                Some(s) => s.clone(),
                None => {
                    let z = p.var.zeros_like()?;
                    Moments {
                        m: z.clone(),
                        v: z.clone(),
                        v_max: z,
                    }
                }
            };
            let m = st.m.affine(b1, 0.0)?.add(&g.affine(1.0 - b1, 0.0)?)?;
            let v =
                st.v.affine(b2, 0.0)?
                    .add(&g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let v_max = st.v_max.maximum(&v)?;
            let denom = v_max.sqrt()?.affine(1.0 / bias2_sqrt, eps)?;
            let update = m.div(&denom)?.affine(lr / bias1, 0.0)?;
            set(&p.var, &p.var.as_tensor().sub(&update)?)?;
            self.state.insert(p.name.clone(), Moments { m, v, v_max });
        }
        Ok(())
    }

    /// Adds the optimizer state to a checkpoint's tensors.
    pub fn export(&self, ckpt: &mut Checkpoint) {
        for (name, st) in &self.state {
            ckpt.tensors
                .insert(format!("{PREFIX}m.{name}"), st.m.clone());
            ckpt.tensors
                .insert(format!("{PREFIX}v.{name}"), st.v.clone());
            ckpt.tensors
                .insert(format!("{PREFIX}v_max.{name}"), st.v_max.clone());
        }
    }

    /// Restores state saved by [`export`](Self::export); `steps` is the
    /// number of updates already applied.
    pub fn import(cfg: AmsgradConfig, ckpt: &Checkpoint, steps: u64) -> Result<Self, NetError> {
        let m = ckpt.prefixed(&format!("{PREFIX}m."));
        let mut v = ckpt.prefixed(&format!("{PREFIX}v."));
        let mut v_max = ckpt.prefixed(&format!("{PREFIX}v_max."));
        let mut state = HashMap::new();
        for (name, m) in m {
            let missing = || NetError::Checkpoint(format!("incomplete optimizer state for {name}"));
            let v = v.remove(&name).ok_or_else(missing)?;
            let v_max = v_max.remove(&name).ok_or_else(missing)?;
            state.insert(name, Moments { m, v, v_max });
        }
        Ok(Self {
            cfg,
            step: steps,
            state,
        })
    }
}

fn set(var: &Var, value: &Tensor) -> candle_core::Result<()> {
    var.set(&value.detach())
}
