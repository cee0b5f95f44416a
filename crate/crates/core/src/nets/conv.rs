//! Convolutions as patch gathering plus one matrix product.
//!
//! [`Gather`] and [`Scatter`] are adjoint linear maps between an image
//! `(n, c, H, W)` and its patch matrix `(c * k * k, n * oh * ow)`, where
//! `cols[(ci, ky, kx), (b, oy, ox)] = img[b, ci, oy * stride + ky - pad, ox * stride + kx - pad]`
//! (zero outside the image). Each is the other's backward pass, so a
//! convolution is `W · gather(x)` and a transposed convolution is
//! `scatter(Wᵀ · x)`, with the products differentiated by candle.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Patches {
    k: usize,
    stride: usize,
    pad: usize,
    image_h: usize,
    image_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Patches {
    /// Image row/column read by output position `o` at kernel offset `kk`.
    #[inline]
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        (o * self.stride + kk)
            .checked_sub(self.pad)
            .filter(|&i| i < extent)
    }

    /// Output columns `lo..hi` whose kernel offset `kx` lands inside the
    /// image, and the image column of `lo`.
    fn columns(&self, kx: usize) -> (usize, usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kx).div_ceil(s);
        let hi = (self.image_w + self.pad)
            .checked_sub(kx)
            .map_or(0, |end| end.div_ceil(s))
            .min(self.out_w);
        let first = (lo * s + kx).saturating_sub(self.pad);
        (lo, hi.max(lo), first)
    }

    fn gather<T: Copy + Default>(&self, img: &[T], n: usize, c: usize) -> Vec<T> {
        let (k, hw_in, hw_out) = (self.k, self.image_h * self.image_w, self.out_h * self.out_w);
        let row_len = n * hw_out;
        let mut cols = vec![T::default(); c * k * k * row_len];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi, first) = self.columns(kx);
                    let row = &mut cols[((ci * k + ky) * k + kx) * row_len..][..row_len];
                    for b in 0..n {
                        let plane = &img[(b * c + ci) * hw_in..][..hw_in];
                        for oy in 0..self.out_h {
                            let Some(iy) = self.source(oy, ky, self.image_h) else {
                                continue;
                            };
                            let src = &plane[iy * self.image_w..][..self.image_w];
                            let dst = &mut row[b * hw_out + oy * self.out_w..][..self.out_w];
                            if self.stride == 1 {
                                dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (d, &v) in dst[lo..hi]
                                    .iter_mut()
                                    .zip(src[first..].iter().step_by(self.stride))
                                {
                                    *d = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn scatter<T: Copy + Default + AddAssign>(&self, cols: &[T], n: usize, c: usize) -> Vec<T> {
        let (k, hw_in, hw_out) = (self.k, self.image_h * self.image_w, self.out_h * self.out_w);
        let row_len = n * hw_out;
        let mut img = vec![T::default(); n * c * hw_in];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi, first) = self.columns(kx);
                    let row = &cols[((ci * k + ky) * k + kx) * row_len..][..row_len];
                    for b in 0..n {
                        let plane = &mut img[(b * c + ci) * hw_in..][..hw_in];
                        for oy in 0..self.out_h {
                            let Some(iy) = self.source(oy, ky, self.image_h) else {
                                continue;
                            };
                            let dst = &mut plane[iy * self.image_w..][..self.image_w];
                            let src = &row[b * hw_out + oy * self.out_w..][..self.out_w];
                            for (d, &v) in dst[first..]
                                .iter_mut()
                                .step_by(self.stride)
                                .zip(&src[lo..hi])
                            {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        img
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("patch ops need contiguous inputs"),
    }
}

struct Gather(Patches);
struct Scatter(Patches);

impl CustomOp1 for Gather {
    fn name(&self) -> &'static str {
        "patch-gather"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let p = self.0;
        let (n, c, h, w) = l.shape().dims4()?;
        if (h, w) != (p.image_h, p.image_w) {
            candle_core::bail!(
                "patch gather expects {}x{} images, got {h}x{w}",
                p.image_h,
                p.image_w
            );
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(p.gather(contiguous(v, l)?, n, c)),
            CpuStorage::F64(v) => CpuStorage::F64(p.gather(contiguous(v, l)?, n, c)),
            _ => candle_core::bail!("patch gather supports f32 and f64"),
        };
        Ok((out, Shape::from((c * p.k * p.k, n * p.out_h * p.out_w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Scatter(self.0))?))
    }
}

impl CustomOp1 for Scatter {
    fn name(&self) -> &'static str {
        "patch-scatter"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let p = self.0;
        let (rows, len) = l.shape().dims2()?;
        let (kk, hw) = (p.k * p.k, p.out_h * p.out_w);
        if rows % kk != 0 || len % hw != 0 {
            candle_core::bail!(
                "patch matrix {rows}x{len} does not match {kk} taps and {hw} positions"
            );
        }
        let (c, n) = (rows / kk, len / hw);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(p.scatter(contiguous(v, l)?, n, c)),
            CpuStorage::F64(v) => CpuStorage::F64(p.scatter(contiguous(v, l)?, n, c)),
            _ => candle_core::bail!("patch scatter supports f32 and f64"),
        };
        Ok((out, Shape::from((n, c, p.image_h, p.image_w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Gather(self.0))?))
    }
}

/// Forward pass without autograd tracking.
fn conv2d_untracked(x: &Tensor, weight: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, ci, h, w) = x.dims4()?;
    let (co, wci, k, k2) = weight.dims4()?;
    if wci != ci || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
        candle_core::bail!(
            "conv2d: input {:?} incompatible with weight {:?}",
            x.dims(),
            weight.dims()
        );
    }
    let p = Patches {
        k,
        stride: 1,
        pad,
        image_h: h,
        image_w: w,
        out_h: h + 2 * pad - k + 1,
        out_w: w + 2 * pad - k + 1,
    };
    let cols = x.contiguous()?.apply_op1_no_bwd(&Gather(p))?;
    let y = weight.reshape((co, ci * k * k))?.matmul(&cols)?;
    y.reshape((co, n, p.out_h, p.out_w))?
        .transpose(0, 1)?
        .contiguous()
}

/// Convolution plus per-channel bias with a hand-written backward pass: the
/// input gradient is a convolution of the output gradient with the flipped,
/// transposed kernel, the kernel gradient a single product with the patch
/// matrix.
struct Conv2dOp {
    pad: usize,
}

pub(super) fn storage_tensor(s: &CpuStorage, l: &Layout) -> Result<Tensor> {
    let dev = candle_core::Device::Cpu;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(contiguous(v, l)?, l.shape(), &dev),
        CpuStorage::F64(v) => Tensor::from_slice(contiguous(v, l)?, l.shape(), &dev),
        _ => candle_core::bail!("only f32 and f64 tensors are supported"),
    }
}

pub(super) fn tensor_storage(t: &Tensor) -> Result<(CpuStorage, Shape)> {
    let shape = t.shape().clone();
    let flat = t.flatten_all()?;
    let data = match t.dtype() {
        candle_core::DType::F32 => CpuStorage::F32(flat.to_vec1()?),
        candle_core::DType::F64 => CpuStorage::F64(flat.to_vec1()?),
        other => candle_core::bail!("unsupported dtype {other:?}"),
    };
    Ok((data, shape))
}

impl candle_core::CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-patches"
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
        let y = conv2d_untracked(&storage_tensor(s1, l1)?, &storage_tensor(s2, l2)?, self.pad)?;
        let bias = storage_tensor(s3, l3)?;
        tensor_storage(&y.broadcast_add(&bias.reshape((1, bias.elem_count(), 1, 1))?)?)
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (x, weight, grad) = (x.detach(), weight.detach(), grad.detach());
        let (n, ci, h, w) = x.dims4()?;
        let (co, _, k, _) = weight.dims4()?;
        let flipped = weight.flip(&[2, 3])?.transpose(0, 1)?.contiguous()?;
        let grad_x = conv2d_untracked(&grad, &flipped, k - 1 - self.pad)?;
        let p = Patches {
            k,
            stride: 1,
            pad: self.pad,
            image_h: h,
            image_w: w,
            out_h: h + 2 * self.pad - k + 1,
            out_w: w + 2 * self.pad - k + 1,
        };
        let cols = x.contiguous()?.apply_op1_no_bwd(&Gather(p))?;
        let g = grad
            .transpose(0, 1)?
            .contiguous()?
            .reshape((co, n * p.out_h * p.out_w))?;
        let grad_w = cols.matmul(&g.t()?)?.t()?.reshape((co, ci, k, k))?;
        let grad_b = g.sum(1)?;
        Ok((Some(grad_x), Some(grad_w), Some(grad_b)))
    }
}

/// Stride-1 convolution of `x (n, ci, h, w)` with `weight (co, ci, k, k)`,
/// zero padding `pad` on every side, plus `bias (co)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    let (co, ..) = weight.dims4()?;
    if bias.dims() != [co] {
        candle_core::bail!(
            "conv2d: bias {:?} does not match {co} output channels",
            bias.dims()
        );
    }
    x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, Conv2dOp { pad })
}

/// Transposed convolution without padding: `x (n, ci, h, w)` with
/// `weight (ci, co, k, k)` gives `(n, co, (h - 1) * stride + k, (w - 1) * stride + k)`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, ci, h, w) = x.dims4()?;
    let (wci, co, k, k2) = weight.dims4()?;
    if wci != ci || k != k2 || stride == 0 {
        candle_core::bail!(
            "conv_transpose2d: input {:?} incompatible with weight {:?}",
            x.dims(),
            weight.dims()
        );
    }
    let p = Patches {
        k,
        stride,
        pad: 0,
        image_h: (h - 1) * stride + k,
        image_w: (w - 1) * stride + k,
        out_h: h,
        out_w: w,
    };
    let xm = x.transpose(0, 1)?.contiguous()?.reshape((ci, n * h * w))?;
    let cols = weight.reshape((ci, co * k * k))?.t()?.matmul(&xm)?;
    cols.contiguous()?.apply_op1(Scatter(p))
}
