//! Training objectives on batched candle tensors.
//!
//! Shapes: probabilities and masks are `(n, 1, h, w)`, images `(n, c, h, w)`,
//! displacement fields `(n, 2, h, w)`. Every loss is a mean over the batch.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::warp::warp_tensor;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("ground-truth mask contains non-binary value {0}")]
    NonBinaryGroundTruth(f64),
    #[error("shape mismatch: {a:?} vs {b:?} ({what})")]
    ShapeMismatch {
        a: Vec<usize>,
        b: Vec<usize>,
        what: &'static str,
    },
    #[error("field of spatial size {0}x{1} has no finite differences in either direction")]
    DegenerateField(usize, usize),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegLossKind {
    #[default]
    Mse,
    AsymmetricDice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the diffusion regularizer.
    pub lambda_smooth: f64,
    pub seg_loss_kind: SegLossKind,
    /// Asymmetry of the asymmetric Dice loss.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_smooth: 0.01,
            seg_loss_kind: SegLossKind::Mse,
            beta: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return Err(LossError::Config(format!(
                "lambda_smooth must be >= 0, got {}",
                self.lambda_smooth
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LossError::Config(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Additive smoothing of the asymmetric Dice ratio.
pub const DICE_EPSILON: f64 = 1e-7;

fn same_shape(a: &Tensor, b: &Tensor, what: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(LossError::ShapeMismatch {
            a: a.dims().to_vec(),
            b: b.dims().to_vec(),
            what,
        });
    }
    Ok(())
}

fn check_binary(gt: &Tensor) -> Result<()> {
    let values = gt.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    match values.into_iter().find(|&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(LossError::NonBinaryGroundTruth(v)),
        None => Ok(()),
    }
}

/// Mean of `(a - b)^2` over all entries.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mse operands")?;
    Ok(a.sub(b)?.sqr()?.mean_all()?)
}

/// Mean squared error between a probability map and a binary mask.
pub fn seg_loss_mse(prob: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(prob, gt, "probability vs ground truth")?;
    check_binary(gt)?;
    mse(prob, gt)
}

/// Diffusion regularizer: mean of the squared forward differences of both
/// field components along both spatial directions. A direction of extent 1
/// contributes no entries.
pub fn smoothness_loss(field: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = field.dims4()?;
    if h < 2 && w < 2 {
        return Err(LossError::DegenerateField(h, w));
    }
    let mut total: Option<Tensor> = None;
    let mut count = 0usize;
    if h >= 2 {
        let d = field
            .narrow(2, 1, h - 1)?
            .sub(&field.narrow(2, 0, h - 1)?)?;
        total = Some(d.sqr()?.sum_all()?);
        count += n * c * (h - 1) * w;
    }
    if w >= 2 {
        let d = field
            .narrow(3, 1, w - 1)?
            .sub(&field.narrow(3, 0, w - 1)?)?;
        let s = d.sqr()?.sum_all()?;
        total = Some(match total {
            Some(t) => t.add(&s)?,
            None => s,
        });
        count += n * c * h * (w - 1);
    }
    Ok(total
        .expect("at least one direction")
        .affine(1.0 / count as f64, 0.0)?)
}

/// Loss tensors returned by [`registration_loss`].
#[derive(Debug, Clone)]
pub struct RegistrationLoss {
    pub total: Tensor,
    pub sim: Tensor,
    pub smooth: Tensor,
}

/// `MSE(x_i, warp(x_j, field)) + lambda * smoothness(field)`.
pub fn registration_loss(
    x_i: &Tensor,
    x_j: &Tensor,
    field: &Tensor,
    cfg: &LossConfig,
) -> Result<RegistrationLoss> {
    same_shape(x_i, x_j, "fixed vs moving image")?;
    let (n, _, h, w) = x_j.dims4()?;
    if field.dims() != [n, 2, h, w] {
        return Err(LossError::ShapeMismatch {
            a: x_j.dims().to_vec(),
            b: field.dims().to_vec(),
            what: "moving image vs field",
        });
    }
    let warped = warp_tensor(x_j, field)?;
    let sim = mse(x_i, &warped)?;
    let smooth = smoothness_loss(field)?;
    let total = sim.add(&smooth.affine(cfg.lambda_smooth, 0.0)?)?;
    Ok(RegistrationLoss { total, sim, smooth })
}

/// `1 - F_beta` on soft counts, with additive smoothing in numerator and
/// denominator.
pub fn asymmetric_dice_loss(prob: &Tensor, gt: &Tensor, beta: f64) -> Result<Tensor> {
    same_shape(prob, gt, "probability vs ground truth")?;
    if beta.is_nan() || beta <= 0.0 {
        return Err(LossError::Config(format!("beta must be > 0, got {beta}")));
    }
    let b2 = beta * beta;
    let tp = prob.mul(gt)?.sum_all()?;
    let p_sum = prob.sum_all()?;
    let g_sum = gt.sum_all()?;
    // FN = sum(g) - TP, FP = sum(p) - TP
    let fn_ = g_sum.sub(&tp)?;
    let fp = p_sum.sub(&tp)?;
    let num = tp.affine(1.0 + b2, DICE_EPSILON)?;
    let den = tp
        .affine(1.0 + b2, DICE_EPSILON)?
        .add(&fn_.affine(b2, 0.0)?)?
        .add(&fp)?;
    Ok(num.div(&den)?.affine(-1.0, 1.0)?)
}

/// Segmentation loss selected by `cfg.seg_loss_kind`.
pub fn seg_loss(prob: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    match cfg.seg_loss_kind {
        SegLossKind::Mse => seg_loss_mse(prob, gt),
        SegLossKind::AsymmetricDice => {
            check_binary(gt)?;
            asymmetric_dice_loss(prob, gt, cfg.beta)
        }
    }
}

/// Loss tensors returned by [`multitask_loss`]; `total = seg + reg`.
#[derive(Debug, Clone)]
pub struct MultitaskLoss {
    pub total: Tensor,
    pub seg: Tensor,
    pub reg: Tensor,
    pub sim: Tensor,
    pub smooth: Tensor,
}

/// Scalar values of the loss components, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub seg: f64,
    pub sim: f64,
    pub smooth: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl MultitaskLoss {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            total: scalar(&self.total)?,
            seg: scalar(&self.seg)?,
            sim: scalar(&self.sim)?,
            smooth: scalar(&self.smooth)?,
        })
    }
}

/// Unweighted sum of the segmentation and registration losses.
pub fn multitask_loss(
    prob: &Tensor,
    gt: &Tensor,
    x_i: &Tensor,
    x_j: &Tensor,
    field: &Tensor,
    cfg: &LossConfig,
) -> Result<MultitaskLoss> {
    let seg = seg_loss(prob, gt, cfg)?;
    let reg = registration_loss(x_i, x_j, field, cfg)?;
    Ok(MultitaskLoss {
        total: seg.add(&reg.total)?,
        seg,
        reg: reg.total,
        sim: reg.sim,
        smooth: reg.smooth,
    })
}

pub fn value(t: &Tensor) -> Result<f64> {
    scalar(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::gradcheck::{self, GradcheckReport};

    fn t(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    fn binary_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Brute-force smoothness: double loop over every forward difference.
    fn smoothness_oracle(f: &[f64], n: usize, h: usize, w: usize) -> f64 {
        let at = |b: usize, c: usize, r: usize, k: usize| f[((b * 2 + c) * h + r) * w + k];
        let (mut sum, mut count) = (0.0, 0usize);
        for b in 0..n {
            for c in 0..2 {
                for r in 0..h {
                    for k in 0..w {
                        if r + 1 < h {
                            sum += (at(b, c, r + 1, k) - at(b, c, r, k)).powi(2);
                            count += 1;
                        }
                        if k + 1 < w {
                            sum += (at(b, c, r, k + 1) - at(b, c, r, k)).powi(2);
                            count += 1;
                        }
                    }
                }
            }
        }
        sum / count as f64
    }

    #[test]
    fn seg_mse_examples() {
        let gt = t(vec![0.0, 1.0, 1.0, 0.0], (1, 1, 2, 2));
        assert_eq!(value(&seg_loss_mse(&gt, &gt).unwrap()).unwrap(), 0.0);
        let half = t(vec![0.5; 4], (1, 1, 2, 2));
        assert_eq!(value(&seg_loss_mse(&half, &gt).unwrap()).unwrap(), 0.25);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_vec(&mut rng, 16, 0.0, 1.0);
        let g = binary_vec(&mut rng, 16);
        let want = p.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 16.0;
        let got = value(&seg_loss_mse(&t(p, (1, 1, 4, 4)), &t(g, (1, 1, 4, 4))).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn seg_mse_rejects_soft_masks() {
        let gt = t(vec![0.0, 0.5, 1.0, 0.0], (1, 1, 2, 2));
        assert!(
            matches!(seg_loss_mse(&gt, &gt), Err(LossError::NonBinaryGroundTruth(v)) if v == 0.5)
        );
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(
            value(&smoothness_loss(&t(vec![3.0; 32], (1, 2, 4, 4))).unwrap()).unwrap(),
            0.0
        );

        let mut f = vec![0.0; 32];
        for r in 0..4 {
            for k in 0..4 {
                f[r * 4 + k] = r as f64;
            }
        }
        assert_eq!(
            value(&smoothness_loss(&t(f, (1, 2, 4, 4))).unwrap()).unwrap(),
            0.25
        );

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = rand_vec(&mut rng, 50, -2.0, 2.0);
        let want = smoothness_oracle(&f, 1, 5, 5);
        let got = value(&smoothness_loss(&t(f, (1, 2, 5, 5))).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn smoothness_degenerate_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = rand_vec(&mut rng, 12, -1.0, 1.0);
        let got = value(&smoothness_loss(&t(f.clone(), (1, 2, 1, 6))).unwrap()).unwrap();
        assert!((got - smoothness_oracle(&f, 1, 1, 6)).abs() < 1e-12);
        assert!(matches!(
            smoothness_loss(&t(vec![1.0, 2.0], (1, 2, 1, 1))),
            Err(LossError::DegenerateField(1, 1))
        ));
    }

    #[test]
    fn smoothness_ignores_constant_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rand_vec(&mut rng, 72, -1.0, 1.0);
        let shifted: Vec<f64> = f
            .iter()
            .enumerate()
            .map(|(i, v)| v + if i < 36 { 2.5 } else { -1.25 })
            .collect();
        let a = value(&smoothness_loss(&t(f, (1, 2, 6, 6))).unwrap()).unwrap();
        let b = value(&smoothness_loss(&t(shifted, (1, 2, 6, 6))).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn registration_examples() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = t(rand_vec(&mut rng, 2 * 36, 0.0, 1.0), (1, 2, 6, 6));
        let zero = Tensor::zeros((1, 2, 6, 6), DType::F64, &Device::Cpu).unwrap();
        let r = registration_loss(&x, &x, &zero, &cfg).unwrap();
        assert_eq!(value(&r.total).unwrap(), 0.0);

        // constant shift: smoothness vanishes, similarity equals MSE to the shifted copy.
        let c = t([vec![0.5; 36], vec![-1.0; 36]].concat(), (1, 2, 6, 6));
        let r = registration_loss(&x, &x, &c, &cfg).unwrap();
        assert_eq!(value(&r.smooth).unwrap(), 0.0);
        let shifted = crate::warp::warp_tensor(&x, &c).unwrap();
        let want = value(&mse(&x, &shifted).unwrap()).unwrap();
        assert!((value(&r.total).unwrap() - want).abs() < 1e-15);

        // lambda = 0 leaves the pure similarity term.
        let y = t(rand_vec(&mut rng, 72, 0.0, 1.0), (1, 2, 6, 6));
        let f = t(rand_vec(&mut rng, 72, -1.0, 1.0), (1, 2, 6, 6));
        let r0 = registration_loss(
            &x,
            &y,
            &f,
            &LossConfig {
                lambda_smooth: 0.0,
                ..cfg
            },
        )
        .unwrap();
        let direct = value(&mse(&x, &crate::warp::warp_tensor(&y, &f).unwrap()).unwrap()).unwrap();
        assert!((value(&r0.total).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn multitask_is_plain_sum() {
        let cfg = LossConfig {
            lambda_smooth: 0.3,
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prob = t(rand_vec(&mut rng, 16, 0.0, 1.0), (1, 1, 4, 4));
        let gt = t(binary_vec(&mut rng, 16), (1, 1, 4, 4));
        let xi = t(rand_vec(&mut rng, 32, 0.0, 1.0), (1, 2, 4, 4));
        let xj = t(rand_vec(&mut rng, 32, 0.0, 1.0), (1, 2, 4, 4));
        let f = t(rand_vec(&mut rng, 32, -1.0, 1.0), (1, 2, 4, 4));
        let v = multitask_loss(&prob, &gt, &xi, &xj, &f, &cfg)
            .unwrap()
            .values()
            .unwrap();
        let seg = value(&seg_loss_mse(&prob, &gt).unwrap()).unwrap();
        let sim = value(&mse(&xi, &crate::warp::warp_tensor(&xj, &f).unwrap()).unwrap()).unwrap();
        let smooth = value(&smoothness_loss(&f).unwrap()).unwrap();
        assert!((v.total - (seg + sim + 0.3 * smooth)).abs() < 1e-12);
        assert_eq!((v.seg, v.sim, v.smooth), (seg, sim, smooth));

        let zero = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let v = multitask_loss(&gt, &gt, &xi, &xi, &zero, &cfg)
            .unwrap()
            .values()
            .unwrap();
        assert_eq!(v.total, 0.0);
    }

    /// Independent soft-Dice: 1 - 2 sum(pg) / (sum p + sum g).
    fn soft_dice(p: &[f64], g: &[f64]) -> f64 {
        let tp: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let s: f64 = p.iter().sum::<f64>() + g.iter().sum::<f64>();
        1.0 - (2.0 * tp + DICE_EPSILON) / (s + DICE_EPSILON)
    }

    #[test]
    fn asymmetric_dice_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = binary_vec(&mut rng, 16);
        let gt = t(g.clone(), (1, 1, 4, 4));
        assert!(
            value(&asymmetric_dice_loss(&gt, &gt, 1.5).unwrap())
                .unwrap()
                .abs()
                < 1e-9
        );

        let p = rand_vec(&mut rng, 16, 0.0, 1.0);
        let got =
            value(&asymmetric_dice_loss(&t(p.clone(), (1, 1, 4, 4)), &gt, 1.0).unwrap()).unwrap();
        assert!((got - soft_dice(&p, &g)).abs() < 1e-9);

        let z = t(vec![0.0; 16], (1, 1, 4, 4));
        assert!(
            value(&asymmetric_dice_loss(&z, &z, 1.5).unwrap())
                .unwrap()
                .abs()
                < 1e-12
        );
        assert!(asymmetric_dice_loss(&z, &z, 0.0).is_err());
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = LossConfig::default();
        for _ in 0..20 {
            let prob = t(rand_vec(&mut rng, 16, 0.0, 1.0), (1, 1, 4, 4));
            let gt = t(binary_vec(&mut rng, 16), (1, 1, 4, 4));
            let xi = t(rand_vec(&mut rng, 32, -1.0, 1.0), (1, 2, 4, 4));
            let xj = t(rand_vec(&mut rng, 32, -1.0, 1.0), (1, 2, 4, 4));
            let f = t(rand_vec(&mut rng, 32, -2.0, 2.0), (1, 2, 4, 4));
            let v = multitask_loss(&prob, &gt, &xi, &xj, &f, &cfg)
                .unwrap()
                .values()
                .unwrap();
            assert!(v.seg >= 0.0 && v.sim >= 0.0 && v.smooth >= 0.0);
            assert!(value(&asymmetric_dice_loss(&prob, &gt, 1.5).unwrap()).unwrap() >= 0.0);
        }
    }

    /// Name, values and 4D shape of one loss input.
    type LossInput<'a> = (&'a str, Vec<f64>, (usize, usize, usize, usize));

    /// Gradients of every loss with respect to each input, against central
    /// differences of the same forward pass.
    fn gradcheck_loss<F>(inputs: &[LossInput<'_>], f: F) -> GradcheckReport
    where
        F: Fn(&[Tensor]) -> Tensor,
    {
        let vars: Vec<Var> = inputs
            .iter()
            .map(|(_, v, s)| Var::from_tensor(&t(v.clone(), *s)).unwrap())
            .collect();
        let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let grads = f(&tensors).backward().unwrap();
        let mut report = GradcheckReport::default();
        for (k, (name, x, _)) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k].as_tensor())
                .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
                .unwrap_or_else(|| vec![0.0; x.len()]);
            gradcheck::check_against(
                &mut report,
                name,
                x,
                &analytic,
                None,
                gradcheck::DEFAULT_STEP,
                |p| {
                    let mut ts = tensors.clone();
                    ts[k] = t(p.to_vec(), inputs[k].2);
                    value(&f(&ts)).unwrap()
                },
            );
        }
        report
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = LossConfig {
            lambda_smooth: 0.5,
            ..LossConfig::default()
        };
        let s1 = (1, 1, 4, 4);
        let s2 = (1, 2, 4, 4);
        let prob = rand_vec(&mut rng, 16, 0.05, 0.95);
        let gt = binary_vec(&mut rng, 16);
        let xi = rand_vec(&mut rng, 32, -1.0, 1.0);
        let xj = rand_vec(&mut rng, 32, -1.0, 1.0);
        let field: Vec<f64> = (0..32)
            .map(|_| rng.random_range(-2i32..=1) as f64 + rng.random_range(0.05..0.95))
            .collect();

        let r = gradcheck_loss(&[("prob", prob.clone(), s1)], |ts| {
            seg_loss_mse(&ts[0], &t(gt.clone(), s1)).unwrap()
        });
        assert!(r.passed(), "seg mse {r:?}");

        let r = gradcheck_loss(&[("field", field.clone(), s2)], |ts| {
            smoothness_loss(&ts[0]).unwrap()
        });
        assert!(r.passed(), "smoothness {r:?}");

        let r = gradcheck_loss(
            &[
                ("x_i", xi.clone(), s2),
                ("x_j", xj.clone(), s2),
                ("field", field.clone(), s2),
            ],
            |ts| {
                registration_loss(&ts[0], &ts[1], &ts[2], &cfg)
                    .unwrap()
                    .total
            },
        );
        assert!(r.passed(), "registration {r:?}");

        let r = gradcheck_loss(
            &[
                ("prob", prob.clone(), s1),
                ("x_i", xi, s2),
                ("x_j", xj, s2),
                ("field", field, s2),
            ],
            |ts| {
                multitask_loss(&ts[0], &t(gt.clone(), s1), &ts[1], &ts[2], &ts[3], &cfg)
                    .unwrap()
                    .total
            },
        );
        assert!(r.passed(), "multitask {r:?}");

        let r = gradcheck_loss(&[("prob", prob, s1), ("gt", gt, s1)], |ts| {
            asymmetric_dice_loss(&ts[0], &ts[1], 1.5).unwrap()
        });
        assert!(r.passed(), "asymmetric dice {r:?}");
    }
}
