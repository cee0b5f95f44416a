//! Per-channel normalization and affine maps on `(n, c, h, w)` tensors with
//! hand-written backward passes. Arithmetic is carried out in f64 whatever
//! the storage type.

use candle_core::{CpuStorage, CustomOp3, DType, Device, Layout, Result, Shape, Tensor};

fn to_f64(s: &CpuStorage, l: &Layout) -> Result<Vec<f64>> {
    Ok(match s {
        CpuStorage::F32(v) => contiguous(v, l)?.iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => contiguous(v, l)?.to_vec(),
        _ => candle_core::bail!("channel ops support f32 and f64"),
    })
}

fn is_f32(s: &CpuStorage) -> bool {
    matches!(s, CpuStorage::F32(_))
}

fn storage(v: Vec<f64>, f32: bool) -> CpuStorage {
    if f32 {
        CpuStorage::F32(v.into_iter().map(|x| x as f32).collect())
    } else {
        CpuStorage::F64(v)
    }
}

fn tensor_f64(t: &Tensor) -> Result<Vec<f64>> {
    t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()
}

fn tensor_from(v: Vec<f64>, shape: &Shape, dtype: DType) -> Result<Tensor> {
    Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)
}

/// `(n, c, plane size)` of a 4D shape.
fn geometry(shape: &Shape) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = shape.dims4()?;
    Ok((n, c, h * w))
}

/// Visits every element of channel `ch`.
fn channel(data: &[f64], n: usize, c: usize, hw: usize, ch: usize) -> impl Iterator<Item = &f64> {
    (0..n).flat_map(move |b| data[(b * c + ch) * hw..][..hw].iter())
}

/// Per-channel mean and biased variance over batch and space.
fn stats(data: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    (0..c)
        .map(|ch| {
            let mean = channel(data, n, c, hw, ch).sum::<f64>() / count;
            let var = channel(data, n, c, hw, ch)
                .map(|x| (x - mean).powi(2))
                .sum::<f64>()
                / count;
            (mean, var)
        })
        .unzip()
}

/// Per-channel batch mean and biased variance of `x`.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, hw) = geometry(x.shape())?;
    Ok(stats(&tensor_f64(x)?, n, c, hw))
}

/// Batch normalization with batch statistics: `gamma * xhat + beta`.
struct BatchNormOp {
    eps: f64,
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (n, c, hw) = geometry(l1.shape())?;
        let mut x = to_f64(s1, l1)?;
        let (gamma, beta) = (to_f64(s2, l2)?, to_f64(s3, l3)?);
        let (mean, var) = stats(&x, n, c, hw);
        for b in 0..n {
            for ch in 0..c {
                let scale = gamma[ch] / (var[ch] + self.eps).sqrt();
                let shift = beta[ch] - mean[ch] * scale;
                for v in &mut x[(b * c + ch) * hw..][..hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok((storage(x, is_f32(s1)), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, hw) = geometry(x.shape())?;
        let count = (n * hw) as f64;
        let xs = tensor_f64(x)?;
        let g = tensor_f64(grad)?;
        let gm = tensor_f64(gamma)?;
        let (mean, var) = stats(&xs, n, c, hw);
        let mut dx = vec![0.0; xs.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + self.eps).sqrt();
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for b in 0..n {
                let o = (b * c + ch) * hw;
                for (&gv, &xv) in g[o..o + hw].iter().zip(&xs[o..o + hw]) {
                    sum_g += gv;
                    sum_gx += gv * (xv - mean[ch]) * inv;
                }
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            let (mg, mgx) = (sum_g / count, sum_gx / count);
            let k = gm[ch] * inv;
            for b in 0..n {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    let xhat = (xs[i] - mean[ch]) * inv;
                    dx[i] = k * (g[i] - mg - xhat * mgx);
                }
            }
        }
        let dtype = x.dtype();
        Ok((
            Some(tensor_from(dx, x.shape(), dtype)?),
            Some(tensor_from(dgamma, gamma.shape(), dtype)?),
            Some(tensor_from(dbeta, gamma.shape(), dtype)?),
        ))
    }
}

pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        BatchNormOp { eps },
    )
}

fn contiguous<'a, T>(data: &'a [T], l: &Layout) -> Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("channel ops need contiguous inputs".into()))?;
    Ok(&data[start..end])
}

fn affine_planes<T>(x: &[T], n: usize, c: usize, hw: usize, scale: &[T], shift: &[T]) -> Vec<T>
where
    T: Copy + std::ops::Mul<Output = T> + std::ops::Add<Output = T>,
{
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let (a, s) = (scale[ch], shift[ch]);
            out.extend(x[(b * c + ch) * hw..][..hw].iter().map(|&v| v * a + s));
        }
    }
    out
}

/// `x * scale[c] + shift[c]`.
struct ChannelAffineOp;

impl CustomOp3 for ChannelAffineOp {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (n, c, hw) = geometry(l1.shape())?;
        let (scale, shift) = (to_f64(s2, l2)?, to_f64(s3, l3)?);
        let out = match s1 {
            CpuStorage::F32(v) => {
                let (scale, shift): (Vec<f32>, Vec<f32>) = scale
                    .iter()
                    .zip(&shift)
                    .map(|(&a, &b)| (a as f32, b as f32))
                    .unzip();
                CpuStorage::F32(affine_planes(contiguous(v, l1)?, n, c, hw, &scale, &shift))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(affine_planes(contiguous(v, l1)?, n, c, hw, &scale, &shift))
            }
            _ => candle_core::bail!("channel ops support f32 and f64"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, hw) = geometry(x.shape())?;
        let xs = tensor_f64(x)?;
        let mut g = tensor_f64(grad)?;
        let sc = tensor_f64(scale)?;
        let mut dscale = vec![0.0; c];
        let mut dshift = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    dscale[ch] += g[i] * xs[i];
                    dshift[ch] += g[i];
                    g[i] *= sc[ch];
                }
            }
        }
        let dtype = x.dtype();
        Ok((
            Some(tensor_from(g, x.shape(), dtype)?),
            Some(tensor_from(dscale, scale.shape(), dtype)?),
            Some(tensor_from(dshift, scale.shape(), dtype)?),
        ))
    }
}

pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if scale.dims() != [c] || shift.dims() != [c] {
        candle_core::bail!(
            "channel affine: {c} channels vs scale {:?} / shift {:?}",
            scale.dims(),
            shift.dims()
        );
    }
    x.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffineOp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    /// Batch normalization composed from generic tensor ops.
    fn reference(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let c = gamma.dims()[0];
        let mean = x
            .mean_keepdim(0)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .mean_keepdim(3)
            .unwrap();
        let centered = x.broadcast_sub(&mean).unwrap();
        let var = centered
            .sqr()
            .unwrap()
            .mean_keepdim(0)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .mean_keepdim(3)
            .unwrap();
        centered
            .broadcast_div(&var.affine(1.0, 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&gamma.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn batch_norm_matches_composed_ops() {
        let x = Var::from_tensor(&rand(&[3, 4, 5, 2], 1)).unwrap();
        let gamma = Var::from_tensor(&rand(&[4], 2)).unwrap();
        let beta = Var::from_tensor(&rand(&[4], 3)).unwrap();
        let weights = rand(&[3, 4, 5, 2], 4);
        let ours = batch_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let theirs = reference(&x, &gamma, &beta);
        assert!(max_diff(&ours, &theirs) < 1e-12);
        let g1 = ours
            .mul(&weights)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let g2 = theirs
            .mul(&weights)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &gamma, &beta] {
            assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn channel_affine_matches_broadcasts() {
        let x = Var::from_tensor(&rand(&[2, 3, 4, 4], 5)).unwrap();
        let scale = Var::from_tensor(&rand(&[3], 6)).unwrap();
        let shift = Var::from_tensor(&rand(&[3], 7)).unwrap();
        let weights = rand(&[2, 3, 4, 4], 8);
        let ours = channel_affine(&x, &scale, &shift).unwrap();
        let theirs = x
            .broadcast_mul(&scale.reshape((1, 3, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&shift.reshape((1, 3, 1, 1)).unwrap())
            .unwrap();
        assert!(max_diff(&ours, &theirs) < 1e-12);
        let g1 = ours
            .mul(&weights)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let g2 = theirs
            .mul(&weights)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &scale, &shift] {
            assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn stats_are_per_channel() {
        let x =
            Tensor::from_vec(vec![1.0f64, 3.0, 10.0, 10.0], (1, 2, 1, 2), &Device::Cpu).unwrap();
        let (mean, var) = channel_stats(&x).unwrap();
        assert_eq!(mean, vec![2.0, 10.0]);
        assert_eq!(var, vec![1.0, 0.0]);
    }
}
