//! Parameter storage and the FC-DenseNet building blocks.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; saved with the weights but never optimized.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
}

/// Named tensors of a model, initialized from a seeded generator.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    entries: Vec<Param>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn push(
        &mut self,
        name: String,
        values: Vec<f64>,
        shape: &[usize],
        kind: ParamKind,
    ) -> Result<Var> {
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.push(Param {
            name,
            var: var.clone(),
            kind,
        });
        Ok(var)
    }

    /// He-uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    pub fn he_uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<Var> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.push(name, values, shape, ParamKind::Trainable)
    }

    pub fn constant(
        &mut self,
        name: String,
        shape: &[usize],
        value: f64,
        kind: ParamKind,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.push(name, vec![value; n], shape, kind)
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.trainable().map(|p| p.var.elem_count()).sum()
    }

    /// Snapshot of every parameter; later updates do not show through.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.var.as_tensor().copy().expect("copying a CPU tensor"),
                )
            })
            .collect()
    }

    /// Overwrites every parameter from `tensors`. Names and shapes must match
    /// exactly; nothing is reshaped.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(NetError::Checkpoint(format!(
                "checkpoint holds {} model tensors, model has {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for p in &self.entries {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| NetError::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.dims() != p.var.dims() {
                return Err(NetError::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<Self> {
        Self::with_bias(ps, name, c_in, c_out, k, 0.0)
    }

    /// He-uniform weight with every bias entry set to `bias`.
    pub fn with_bias(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: f64,
    ) -> Result<Self> {
        let weight = ps.he_uniform(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k)?;
        let bias = ps.constant(format!("{name}.bias"), &[c_out], bias, ParamKind::Trainable)?;
        Ok(Self {
            weight,
            bias,
            padding: k / 2,
            in_channels: c_in,
            out_channels: c_out,
        })
    }

    /// Weight and bias start at zero.
    pub fn zeros(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<Self> {
        let weight = ps.constant(
            format!("{name}.weight"),
            &[c_out, c_in, k, k],
            0.0,
            ParamKind::Trainable,
        )?;
        let bias = ps.constant(format!("{name}.bias"), &[c_out], 0.0, ParamKind::Trainable)?;
        Ok(Self {
            weight,
            bias,
            padding: k / 2,
            in_channels: c_in,
            out_channels: c_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(super::conv::conv2d(
            x,
            self.weight.as_tensor(),
            self.bias.as_tensor(),
            self.padding,
        )?)
    }
}

/// 3x3 transposed convolution with stride 2; the output is cropped to the
/// skip connection's extent.
#[derive(Debug)]
pub struct TransitionUp {
    weight: Var,
    bias: Var,
    pub channels: usize,
}

impl TransitionUp {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let weight = ps.he_uniform(
            format!("{name}.weight"),
            &[channels, channels, 3, 3],
            channels * 9,
        )?;
        let bias = ps.constant(
            format!("{name}.bias"),
            &[channels],
            0.0,
            ParamKind::Trainable,
        )?;
        Ok(Self {
            weight,
            bias,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let up = super::conv::conv_transpose2d(x, self.weight.as_tensor(), 2)?;
        let ones = Tensor::ones(self.channels, up.dtype(), up.device())?;
        let up = super::norm::channel_affine(&up, &ones, self.bias.as_tensor())?;
        let (_, _, h, w) = skip.dims4()?;
        let up = up.narrow(2, 0, h)?.narrow(3, 0, w)?;
        Ok(Tensor::cat(&[&up, skip], 1)?)
    }
}

#[derive(Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(
                format!("{name}.weight"),
                &[channels],
                1.0,
                ParamKind::Trainable,
            )?,
            beta: ps.constant(
                format!("{name}.bias"),
                &[channels],
                0.0,
                ParamKind::Trainable,
            )?,
            running_mean: ps.constant(
                format!("{name}.running_mean"),
                &[channels],
                0.0,
                ParamKind::Buffer,
            )?,
            running_var: ps.constant(
                format!("{name}.running_var"),
                &[channels],
                1.0,
                ParamKind::Buffer,
            )?,
            channels,
        })
    }

    /// Batch statistics in training mode (running statistics are updated as a
    /// side effect); running statistics in evaluation mode.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            let (n, _, h, w) = x.dims4()?;
            let (mean, var) = super::norm::channel_stats(x)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            };
            let update = |running: &Var, batch: Vec<f64>, factor: f64| -> Result<()> {
                let batch = Tensor::from_vec(batch, self.channels, &Device::Cpu)?
                    .to_dtype(running.dtype())?;
                let next = running
                    .as_tensor()
                    .affine(1.0 - BN_MOMENTUM, 0.0)?
                    .add(&batch.affine(BN_MOMENTUM * factor, 0.0)?)?;
                Ok(running.set(&next)?)
            };
            update(&self.running_mean, mean, 1.0)?;
            update(&self.running_var, var, unbiased)?;
            return Ok(super::norm::batch_norm(
                x,
                self.gamma.as_tensor(),
                self.beta.as_tensor(),
                BN_EPS,
            )?);
        }
        let scale = self
            .gamma
            .as_tensor()
            .div(&self.running_var.as_tensor().affine(1.0, BN_EPS)?.sqrt()?)?;
        let shift = self
            .beta
            .as_tensor()
            .sub(&self.running_mean.as_tensor().mul(&scale)?)?;
        Ok(super::norm::channel_affine(x, &scale, &shift)?)
    }
}

/// Channel dropout: zeroes whole feature maps with probability `rate` and
/// rescales the survivors. Identity outside training or when `rate == 0`.
pub fn dropout2d(x: &Tensor, rate: f64, mode: &mut Mode<'_>) -> Result<Tensor> {
    let rng = match mode {
        Mode::Train(rng) if rate > 0.0 => rng,
        _ => return Ok(x.clone()),
    };
    let (n, c, _, _) = x.dims4()?;
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n * c)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, (n, c, 1, 1), x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_mul(&mask)?)
}

/// BN -> ReLU -> 3x3 conv -> dropout.
#[derive(Debug)]
pub struct DenseLayer {
    bn: BatchNorm2d,
    conv: Conv2d,
    dropout: f64,
}

impl DenseLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        growth: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm2d::new(ps, &format!("{name}.norm"), c_in)?,
            conv: Conv2d::new(ps, &format!("{name}.conv"), c_in, growth, 3)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let y = self.bn.forward(x, mode.is_train())?.relu()?;
        let y = self.conv.forward(&y)?;
        dropout2d(&y, self.dropout, mode)
    }
}

/// Densely connected block. In the upsampling path only the newly produced
/// feature maps are returned; otherwise the input is concatenated with them.
#[derive(Debug)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
    pub in_channels: usize,
    pub growth: usize,
    pub upsample: bool,
}

impl DenseBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        growth: usize,
        n_layers: usize,
        dropout: f64,
        upsample: bool,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| {
                DenseLayer::new(
                    ps,
                    &format!("{name}.layer{i}"),
                    c_in + i * growth,
                    growth,
                    dropout,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            in_channels: c_in,
            growth,
            upsample,
        })
    }

    pub fn out_channels(&self) -> usize {
        let new = self.growth * self.layers.len();
        if self.upsample {
            new
        } else {
            self.in_channels + new
        }
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut features = x.clone();
        let mut fresh = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(&features, mode)?;
            features = Tensor::cat(&[&features, &out], 1)?;
            fresh.push(out);
        }
        if self.upsample {
            if fresh.is_empty() {
                return Err(NetError::Config(
                    "upsampling dense block without layers".into(),
                ));
            }
            Ok(Tensor::cat(&fresh, 1)?)
        } else {
            Ok(features)
        }
    }
}

/// BN -> ReLU -> 1x1 conv -> dropout -> 2x2 max-pool.
#[derive(Debug)]
pub struct TransitionDown {
    bn: BatchNorm2d,
    conv: Conv2d,
    dropout: f64,
}

impl TransitionDown {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm2d::new(ps, &format!("{name}.norm"), channels)?,
            conv: Conv2d::new(ps, &format!("{name}.conv"), channels, channels, 1)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let y = self.bn.forward(x, mode.is_train())?.relu()?;
        let y = dropout2d(&self.conv.forward(&y)?, self.dropout, mode)?;
        max_pool2x2(&y)
    }
}

/// 2x2 max-pooling with stride 2, built from reductions so that the gradient
/// reaches the arg-max with unit weight.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.contiguous()?
        .reshape((n, c, h / 2, 2, w / 2, 2))?
        .max(5)?
        .max(3)?)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}
