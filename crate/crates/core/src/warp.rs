//! 2D spatial transformer.
//!
//! A displacement field has shape `(2, h, w)` in pixel units: component 0 is
//! the row displacement, component 1 the column displacement. Warping samples
//! the image bilinearly at `p + u(p)`; coordinates outside the grid are
//! clamped to the border (replicate padding).
//!
//! At exact knots the derivative with respect to the field is the
//! right-sided one, and it is zero where the coordinate is clamped.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};
use ndarray::{Array3, ArrayView3};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{self, GradcheckReport};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WarpError {
    #[error("field shape {field:?} does not match image shape {image:?} (expected (2, h, w))")]
    ShapeMismatch {
        image: Vec<usize>,
        field: Vec<usize>,
    },
    #[error("gradient check too large: shape {0:?} (at most 8x8)")]
    CheckTooLarge((usize, usize, usize)),
}

/// Per-pixel displacement `(2, h, w)` in pixels, `(row, col)` component order.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField2D {
    pub data: Array3<f32>,
}

impl DisplacementField2D {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Array3::zeros((2, h, w)),
        }
    }

    /// The same displacement `(dr, dc)` at every pixel.
    pub fn constant(h: usize, w: usize, dr: f32, dc: f32) -> Self {
        let mut data = Array3::zeros((2, h, w));
        data.index_axis_mut(ndarray::Axis(0), 0).fill(dr);
        data.index_axis_mut(ndarray::Axis(0), 1).fill(dc);
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Saves the field in the raw float32 + JSON format, component axis first.
    pub fn save_raw(&self, path: &std::path::Path) -> Result<(), crate::volumes::VolumeError> {
        crate::volumes::write_raw(path, &self.data.clone().into_dyn(), None, false)
    }

    pub fn load_raw(path: &std::path::Path) -> Result<Self, crate::volumes::VolumeError> {
        let (array, _) = crate::volumes::read_raw(path)?;
        let shape = array.shape().to_vec();
        match array.into_dimensionality::<ndarray::Ix3>() {
            Ok(data) if shape[0] == 2 => Ok(Self { data }),
            _ => Err(crate::volumes::VolumeError::Format {
                path: path.display().to_string(),
                reason: format!("expected a (2, h, w) field, found {shape:?}"),
            }),
        }
    }
}

struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// d(clamped coordinate)/d(displacement): 1 inside the grid, 0 when clamped.
    slope: T,
}

fn tap<T: Float>(pos: T, n: usize) -> Tap<T> {
    let max = T::from(n - 1).unwrap();
    let inside = pos >= T::zero() && pos <= max;
    let p = pos.max(T::zero()).min(max);
    let i0 = p.floor().to_usize().unwrap().min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    Tap {
        i0,
        i1,
        frac: p - T::from(i0).unwrap(),
        slope: if inside { T::one() } else { T::zero() },
    }
}

fn check_shapes(img: (usize, usize, usize), field: (usize, usize, usize)) -> Result<(), WarpError> {
    if field != (2, img.1, img.2) {
        return Err(WarpError::ShapeMismatch {
            image: vec![img.0, img.1, img.2],
            field: vec![field.0, field.1, field.2],
        });
    }
    Ok(())
}

/// Raw-slice forward kernel on one `(c, h, w)` image.
fn warp_kernel<T: Float>(img: &[T], field: &[T], out: &mut [T], c: usize, h: usize, w: usize) {
    let hw = h * w;
    for r in 0..h {
        for col in 0..w {
            let p = r * w + col;
            let ty = tap(T::from(r).unwrap() + field[p], h);
            let tx = tap(T::from(col).unwrap() + field[hw + p], w);
            let (wy1, wx1) = (ty.frac, tx.frac);
            let (wy0, wx0) = (T::one() - wy1, T::one() - wx1);
            for ch in 0..c {
                let base = ch * hw;
                let v00 = img[base + ty.i0 * w + tx.i0];
                let v01 = img[base + ty.i0 * w + tx.i1];
                let v10 = img[base + ty.i1 * w + tx.i0];
                let v11 = img[base + ty.i1 * w + tx.i1];
                out[base + p] = wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11);
            }
        }
    }
}

/// Raw-slice backward kernel: accumulates into `grad_img` and `grad_field`.
#[allow(clippy::too_many_arguments)]
fn warp_backward_kernel<T: Float>(
    img: &[T],
    field: &[T],
    grad_out: &[T],
    grad_img: &mut [T],
    grad_field: &mut [T],
    c: usize,
    h: usize,
    w: usize,
) {
    let hw = h * w;
    for r in 0..h {
        for col in 0..w {
            let p = r * w + col;
            let ty = tap(T::from(r).unwrap() + field[p], h);
            let tx = tap(T::from(col).unwrap() + field[hw + p], w);
            let (wy1, wx1) = (ty.frac, tx.frac);
            let (wy0, wx0) = (T::one() - wy1, T::one() - wx1);
            let mut g_row = T::zero();
            let mut g_col = T::zero();
            for ch in 0..c {
                let base = ch * hw;
                let g = grad_out[base + p];
                let i00 = base + ty.i0 * w + tx.i0;
                let i01 = base + ty.i0 * w + tx.i1;
                let i10 = base + ty.i1 * w + tx.i0;
                let i11 = base + ty.i1 * w + tx.i1;
                grad_img[i00] = grad_img[i00] + g * wy0 * wx0;
                grad_img[i01] = grad_img[i01] + g * wy0 * wx1;
                grad_img[i10] = grad_img[i10] + g * wy1 * wx0;
                grad_img[i11] = grad_img[i11] + g * wy1 * wx1;
                let (v00, v01, v10, v11) = (img[i00], img[i01], img[i10], img[i11]);
                g_row = g_row + g * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
                g_col = g_col + g * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
            }
            grad_field[p] = grad_field[p] + g_row * ty.slope;
            grad_field[hw + p] = grad_field[hw + p] + g_col * tx.slope;
        }
    }
}

/// Bilinear warp of a `(c, h, w)` image by a `(2, h, w)` field.
pub fn warp_image<T: Float>(
    img: ArrayView3<'_, T>,
    field: ArrayView3<'_, T>,
) -> Result<Array3<T>, WarpError> {
    check_shapes(img.dim(), field.dim())?;
    let (c, h, w) = img.dim();
    let img_s = img.as_standard_layout();
    let field_s = field.as_standard_layout();
    let mut out = vec![T::zero(); c * h * w];
    warp_kernel(
        img_s.as_slice().unwrap(),
        field_s.as_slice().unwrap(),
        &mut out,
        c,
        h,
        w,
    );
    Ok(Array3::from_shape_vec((c, h, w), out).unwrap())
}

/// Vector-Jacobian product of [`warp_image`]: returns the gradients with
/// respect to the image and to the field given the output gradient.
pub fn warp_image_backward<T: Float>(
    img: ArrayView3<'_, T>,
    field: ArrayView3<'_, T>,
    grad_out: ArrayView3<'_, T>,
) -> Result<(Array3<T>, Array3<T>), WarpError> {
    check_shapes(img.dim(), field.dim())?;
    let (c, h, w) = img.dim();
    assert_eq!(grad_out.dim(), (c, h, w), "output gradient shape");
    let mut gi = vec![T::zero(); c * h * w];
    let mut gf = vec![T::zero(); 2 * h * w];
    warp_backward_kernel(
        img.as_standard_layout().as_slice().unwrap(),
        field.as_standard_layout().as_slice().unwrap(),
        grad_out.as_standard_layout().as_slice().unwrap(),
        &mut gi,
        &mut gf,
        c,
        h,
        w,
    );
    Ok((
        Array3::from_shape_vec((c, h, w), gi).unwrap(),
        Array3::from_shape_vec((2, h, w), gf).unwrap(),
    ))
}

/// Warps a 2D field-typed image; convenience for `f32` data.
pub fn warp_with(
    img: ArrayView3<'_, f32>,
    field: &DisplacementField2D,
) -> Result<Array3<f32>, WarpError> {
    warp_image(img, field.data.view())
}

/// Checks the analytic gradients of `sum(warp_image(img, field))` against
/// central differences on a random `(c, h, w)` problem (at most 8x8).
/// Field values are drawn away from pixel knots.
pub fn warp_gradcheck(
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<GradcheckReport, WarpError> {
    let (c, h, w) = shape;
    if h > 8 || w > 8 {
        return Err(WarpError::CheckTooLarge(shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0));
    let field = Array3::from_shape_fn((2, h, w), |_| {
        let whole = rng.random_range(-2i32..=1) as f64;
        whole + rng.random_range(0.05..0.95)
    });
    Ok(gradcheck_at(img.view(), field.view(), None))
}

/// Gradient check of `sum(weights * warp_image(img, field))` at a given point
/// (`weights` defaults to all ones).
pub fn gradcheck_at(
    img: ArrayView3<'_, f64>,
    field: ArrayView3<'_, f64>,
    weights: Option<ArrayView3<'_, f64>>,
) -> GradcheckReport {
    let (c, h, w) = img.dim();
    let ones = Array3::from_elem((c, h, w), 1.0);
    let weights = weights.map(|v| v.to_owned()).unwrap_or(ones);
    let objective = |i: ArrayView3<'_, f64>, f: ArrayView3<'_, f64>| -> f64 {
        (warp_image(i, f).unwrap() * &weights).sum()
    };
    let (gi, gf) = warp_image_backward(img, field, weights.view()).unwrap();
    let mut report = GradcheckReport::default();
    let img_flat: Vec<f64> = img.iter().copied().collect();
    let field_flat: Vec<f64> = field.iter().copied().collect();
    gradcheck::check_against(
        &mut report,
        "image",
        &img_flat,
        gi.as_slice().unwrap(),
        None,
        gradcheck::DEFAULT_STEP,
        |p| objective(ArrayView3::from_shape((c, h, w), p).unwrap(), field),
    );
    gradcheck::check_against(
        &mut report,
        "field",
        &field_flat,
        gf.as_slice().unwrap(),
        None,
        gradcheck::DEFAULT_STEP,
        |p| objective(img, ArrayView3::from_shape((2, h, w), p).unwrap()),
    );
    report
}

/// Candle operator: warps `(n, c, h, w)` images by `(n, 2, h, w)` fields.
struct WarpOp;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("warp expects contiguous inputs"),
    }
}

fn batched_dims(img: &Shape, field: &Shape) -> candle_core::Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = img.dims4()?;
    let (nf, two, hf, wf) = field.dims4()?;
    if nf != n || two != 2 || hf != h || wf != w {
        candle_core::bail!(
            "warp: image {:?} and field {:?} do not agree",
            img.dims(),
            field.dims()
        );
    }
    Ok((n, c, h, w))
}

fn forward_batch<T: Float>(
    img: &[T],
    field: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let (is, fs) = (c * h * w, 2 * h * w);
    let mut out = vec![T::zero(); n * is];
    for b in 0..n {
        warp_kernel(
            &img[b * is..(b + 1) * is],
            &field[b * fs..(b + 1) * fs],
            &mut out[b * is..(b + 1) * is],
            c,
            h,
            w,
        );
    }
    out
}

fn backward_batch<T: Float>(
    img: &[T],
    field: &[T],
    grad: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let (is, fs) = (c * h * w, 2 * h * w);
    let mut gi = vec![T::zero(); n * is];
    let mut gf = vec![T::zero(); n * fs];
    for b in 0..n {
        warp_backward_kernel(
            &img[b * is..(b + 1) * is],
            &field[b * fs..(b + 1) * fs],
            &grad[b * is..(b + 1) * is],
            &mut gi[b * is..(b + 1) * is],
            &mut gf[b * fs..(b + 1) * fs],
            c,
            h,
            w,
        );
    }
    (gi, gf)
}

impl CustomOp2 for WarpOp {
    fn name(&self) -> &'static str {
        "bilinear-warp"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = batched_dims(l1.shape(), l2.shape())?;
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(forward_batch(
                contiguous(a, l1)?,
                contiguous(b, l2)?,
                n,
                c,
                h,
                w,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(forward_batch(
                contiguous(a, l1)?,
                contiguous(b, l2)?,
                n,
                c,
                h,
                w,
            )),
            _ => candle_core::bail!("warp supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        img: &Tensor,
        field: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = batched_dims(img.shape(), field.shape())?;
        let dev = img.device();
        let (gi, gf) = match img.dtype() {
            DType::F32 => {
                let (a, b) = backward_batch(
                    &img.flatten_all()?.to_vec1::<f32>()?,
                    &field.flatten_all()?.to_vec1::<f32>()?,
                    &grad_res.flatten_all()?.to_vec1::<f32>()?,
                    n,
                    c,
                    h,
                    w,
                );
                (
                    Tensor::from_vec(a, img.shape(), dev)?,
                    Tensor::from_vec(b, field.shape(), dev)?,
                )
            }
            DType::F64 => {
                let (a, b) = backward_batch(
                    &img.flatten_all()?.to_vec1::<f64>()?,
                    &field.flatten_all()?.to_vec1::<f64>()?,
                    &grad_res.flatten_all()?.to_vec1::<f64>()?,
                    n,
                    c,
                    h,
                    w,
                );
                (
                    Tensor::from_vec(a, img.shape(), dev)?,
                    Tensor::from_vec(b, field.shape(), dev)?,
                )
            }
            other => candle_core::bail!("warp does not support {other:?}"),
        };
        Ok((Some(gi), Some(gf)))
    }
}

/// Differentiable warp of `(n, c, h, w)` images by `(n, 2, h, w)` fields.
pub fn warp_tensor(img: &Tensor, field: &Tensor) -> candle_core::Result<Tensor> {
    img.contiguous()?.apply_op2(&field.contiguous()?, WarpOp)
}
