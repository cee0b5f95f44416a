//! Deterministic synthetic longitudinal phantoms.
//!
//! Each subject is an ellipsoidal "brain" with white matter, grey matter and
//! CSF shells, a smooth multiplicative texture, and spherical lesions placed
//! in the white matter (hypointense on T1, hyperintense on FLAIR). The
//! second time point `t_j` is rendered through a smooth displacement field
//! `phi`: voxel `q` of `t_j` shows the anatomy at the point `a` with
//! `a + phi(a) = q`, so warping `t_j` by `phi` (sampling `t_j(p + phi(p))`)
//! recovers `t_i` up to interpolation error.
//! Lesions change between time points according to the change profile.
//!
//! Masks are exact by construction: a voxel belongs to a lesion when the
//! anatomical point it images lies within the lesion radius. Voxels outside
//! the brain are set to the background level, as in skull-stripped scans.

use ndarray::{Array3, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volumes::dataset::{Dataset, Split};
use crate::volumes::{DisplacementField3D, LongitudinalSample, ScanPair, Volume3D, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config field `{field}`: {message}")]
    Config {
        field: &'static str,
        message: String,
    },
    #[error(
        "cannot place lesions for subject {subject} after {attempts} attempts (config: {config})"
    )]
    Placement {
        subject: usize,
        attempts: usize,
        config: String,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Fractions of lesions in each change category, describing the change from
/// `t_i` to `t_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChangeProfile {
    pub grow: f64,
    pub shrink: f64,
    pub appear: f64,
    pub disappear: f64,
    #[serde(rename = "static")]
    pub unchanged: f64,
}

impl Default for ChangeProfile {
    fn default() -> Self {
        Self {
            grow: 0.15,
            shrink: 0.15,
            appear: 0.1,
            disappear: 0.1,
            unchanged: 0.5,
        }
    }
}

impl ChangeProfile {
    /// Every lesion identical at both time points.
    pub fn all_static() -> Self {
        Self {
            grow: 0.0,
            shrink: 0.0,
            appear: 0.0,
            disappear: 0.0,
            unchanged: 1.0,
        }
    }

    fn weights(&self) -> [(LesionChange, f64); 5] {
        [
            (LesionChange::Grow, self.grow),
            (LesionChange::Shrink, self.shrink),
            (LesionChange::Appear, self.appear),
            (LesionChange::Disappear, self.disappear),
            (LesionChange::Static, self.unchanged),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionChange {
    Grow,
    Shrink,
    Appear,
    Disappear,
    Static,
}

/// Radius ratio `t_j / t_i` for growing and shrinking lesions.
pub const GROW_FACTOR: f64 = 1.5;
pub const SHRINK_FACTOR: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityParams {
    /// Value outside the brain.
    pub background: f64,
    /// White/grey matter separation on T1 (and half of it on FLAIR).
    pub tissue_contrast: f64,
    /// Additive FLAIR brightening at lesion centres.
    pub lesion_flair_boost: f64,
    /// Standard deviation of i.i.d. Gaussian noise inside the brain.
    pub noise_sigma: f64,
}

impl Default for IntensityParams {
    fn default() -> Self {
        Self {
            background: 0.0,
            tissue_contrast: 0.4,
            lesion_flair_boost: 0.6,
            noise_sigma: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Volume extent `(D, H, W)`.
    pub shape: [usize; 3],
    pub n_subjects: usize,
    /// Inclusive range of lesions drawn per subject (before change toggling).
    pub lesion_count_range: [usize; 2],
    pub lesion_radius_range_vox: [f64; 2],
    pub change_profile: ChangeProfile,
    pub intensity: IntensityParams,
    /// Largest displacement magnitude of the inter-time-point field.
    pub warp_amplitude_vox: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            n_subjects: 7,
            lesion_count_range: [3, 8],
            lesion_radius_range_vox: [1.5, 4.0],
            change_profile: ChangeProfile::default(),
            intensity: IntensityParams::default(),
            warp_amplitude_vox: 2.0,
            seed: 0,
        }
    }
}

fn config_err(field: &'static str, message: impl Into<String>) -> SynthError {
    SynthError::Config {
        field,
        message: message.into(),
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < 8) {
            return Err(config_err(
                "shape",
                format!("every extent must be >= 8, got {:?}", self.shape),
            ));
        }
        let [lo, hi] = self.lesion_count_range;
        if lo > hi {
            return Err(config_err(
                "lesion_count_range",
                format!("min {lo} exceeds max {hi}"),
            ));
        }
        let [rlo, rhi] = self.lesion_radius_range_vox;
        if !(rlo >= 1.0 && rhi >= rlo && rhi.is_finite()) {
            return Err(config_err(
                "lesion_radius_range_vox",
                format!("need 1 <= min <= max, got [{rlo}, {rhi}]"),
            ));
        }
        let weights = self.change_profile.weights();
        if weights.iter().any(|(_, w)| w.is_nan() || *w < 0.0) {
            return Err(config_err(
                "change_profile",
                "fractions must be non-negative",
            ));
        }
        let sum: f64 = weights.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(config_err(
                "change_profile",
                format!("fractions must sum to 1, got {sum}"),
            ));
        }
        if !(self.warp_amplitude_vox >= 0.0 && self.warp_amplitude_vox.is_finite()) {
            return Err(config_err("warp_amplitude_vox", "must be finite and >= 0"));
        }
        let i = &self.intensity;
        if !(i.noise_sigma >= 0.0 && i.noise_sigma.is_finite()) {
            return Err(config_err(
                "intensity.noise_sigma",
                "must be finite and >= 0",
            ));
        }
        if ![i.background, i.tissue_contrast, i.lesion_flair_boost]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(config_err("intensity", "values must be finite"));
        }
        Ok(())
    }
}

/// Smooth random scalar field: values on a coarse lattice, interpolated
/// trilinearly over the volume.
#[derive(Debug, Clone)]
struct SmoothNoise {
    grid: Array3<f64>,
    scale: [f64; 3],
}

impl SmoothNoise {
    fn new(rng: &mut ChaCha8Rng, lattice: usize, shape: [usize; 3]) -> Self {
        let grid =
            Array3::from_shape_fn((lattice, lattice, lattice), |_| rng.random_range(-1.0..1.0));
        let scale = shape.map(|s| (lattice - 1) as f64 / (s.max(2) - 1) as f64);
        Self { grid, scale }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        trilinear(
            &self.grid,
            [
                p[0] * self.scale[0],
                p[1] * self.scale[1],
                p[2] * self.scale[2],
            ],
        )
    }
}

/// Trilinear sample with coordinates clamped to the grid.
fn trilinear(grid: &Array3<f64>, p: [f64; 3]) -> f64 {
    let dims = grid.dim();
    let dims = [dims.0, dims.1, dims.2];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0f64; 3];
    for k in 0..3 {
        let max = (dims[k] - 1) as f64;
        let c = p[k].clamp(0.0, max);
        let f = c.floor();
        lo[k] = f as usize;
        hi[k] = (lo[k] + 1).min(dims[k] - 1);
        t[k] = c - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let pick = |k: usize| corner >> k & 1 == 1;
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for k in 0..3 {
            if pick(k) {
                w *= t[k];
                idx[k] = hi[k];
            } else {
                w *= 1.0 - t[k];
                idx[k] = lo[k];
            }
        }
        if w != 0.0 {
            acc += w * grid[idx];
        }
    }
    acc
}

/// Warps a volume by a displacement field with trilinear interpolation:
/// `out(p) = img(p + field(p))`, sampling positions clamped to the volume.
pub fn warp_volume(img: &Array3<f32>, field: &DisplacementField3D) -> Array3<f32> {
    assert_eq!(
        field.shape(),
        [img.dim().0, img.dim().1, img.dim().2],
        "field/volume shape mismatch"
    );
    let grid = img.mapv(f64::from);
    Array3::from_shape_fn(img.dim(), |(d, h, w)| {
        let p = [
            d as f64 + field.data[[0, d, h, w]] as f64,
            h as f64 + field.data[[1, d, h, w]] as f64,
            w as f64 + field.data[[2, d, h, w]] as f64,
        ];
        trilinear(&grid, p) as f32
    })
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

#[derive(Debug, Clone, PartialEq)]
struct Lesion {
    center: [f64; 3],
    radius_ti: Option<f64>,
    radius_tj: Option<f64>,
}

#[derive(Debug, Clone)]
struct Anatomy {
    center: [f64; 3],
    radii: [f64; 3],
    texture: SmoothNoise,
    boundary: SmoothNoise,
    lesions: Vec<Lesion>,
}

/// Normalized ellipsoid radius where white matter ends.
const WM_EXTENT: f64 = 0.55;
const GM_EXTENT: f64 = 0.8;
const SHELL_WIDTH: f64 = 0.12;
/// Width, in normalized radius, of the fade to background at the brain edge.
const EDGE_WIDTH: f64 = 0.2;
const LESION_T1: f64 = 0.55;
const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy)]
enum Frame {
    Ti,
    Tj,
}

impl Anatomy {
    fn rho(&self, a: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| ((a[k] - self.center[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn inside(&self, a: [f64; 3]) -> bool {
        self.rho(a) < 1.0
    }

    /// Soft lesion occupancy in `[0, 1]` and hard membership at `a`.
    fn lesion_at(&self, a: [f64; 3], frame: Frame) -> (f64, bool) {
        let mut soft = 0.0f64;
        let mut hard = false;
        for l in &self.lesions {
            let r = match frame {
                Frame::Ti => l.radius_ti,
                Frame::Tj => l.radius_tj,
            };
            let Some(r) = r else { continue };
            let d = dist(a, l.center);
            hard |= d <= r;
            soft = soft.max(smoothstep(r + 0.5 - d));
        }
        (soft, hard)
    }

    /// Noise-free (T1, FLAIR) intensities and lesion membership at anatomical
    /// position `a`.
    fn render(&self, a: [f64; 3], frame: Frame, ip: &IntensityParams) -> (f64, f64, bool) {
        let rho = self.rho(a);
        if rho >= 1.0 {
            return (ip.background, ip.background, false);
        }
        let jitter = 0.03 * self.boundary.eval(a);
        let wm = 1.0 - smoothstep((rho + jitter - WM_EXTENT) / SHELL_WIDTH + 0.5);
        let csf = smoothstep((rho + jitter - GM_EXTENT) / SHELL_WIDTH + 0.5);
        let gm = (1.0 - wm - csf).max(0.0);
        let c = ip.tissue_contrast;
        let mut t1 = wm * 1.0 + gm * (1.0 - c) + csf * 0.25;
        let mut flair = wm * 0.55 + gm * (0.55 + 0.5 * c) + csf * 0.1;
        let tex = 1.0 + 0.06 * self.texture.eval(a);
        t1 *= tex;
        flair *= tex;
        let (lesion, hard) = self.lesion_at(a, frame);
        t1 = t1 * (1.0 - lesion) + LESION_T1 * lesion;
        flair += ip.lesion_flair_boost * lesion;
        let fade = smoothstep((1.0 - rho) / EDGE_WIDTH);
        (
            ip.background + (t1 - ip.background) * fade,
            ip.background + (flair - ip.background) * fade,
            hard,
        )
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Generator streams per subject; each stream feeds one independent aspect.
const STREAM_ANATOMY: u64 = 0;
const STREAM_FIELD: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAMS_PER_SUBJECT: u64 = 4;
const STREAM_SPLIT: u64 = u64::MAX;

fn subject_rng(seed: u64, subject: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 * STREAMS_PER_SUBJECT + stream);
    rng
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:03}")
}

fn draw_change(rng: &mut ChaCha8Rng, profile: &ChangeProfile) -> LesionChange {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let weights = profile.weights();
    for (change, w) in weights {
        acc += w;
        if u < acc {
            return change;
        }
    }
    weights
        .iter()
        .rev()
        .find(|(_, w)| *w > 0.0)
        .map(|(c, _)| *c)
        .unwrap_or(LesionChange::Static)
}

fn build_anatomy(cfg: &SynthConfig, subject: usize) -> Result<Anatomy> {
    let mut rng = subject_rng(cfg.seed, subject, STREAM_ANATOMY);
    let shape = cfg.shape;
    let center = shape.map(|s| (s as f64 - 1.0) / 2.0 + rng.random_range(-0.03..0.03) * s as f64);
    let radii = shape.map(|s| s as f64 / 2.0 * rng.random_range(0.78..0.88));
    let texture = SmoothNoise::new(&mut rng, 7, shape);
    let boundary = SmoothNoise::new(&mut rng, 5, shape);
    let mut anatomy = Anatomy {
        center,
        radii,
        texture,
        boundary,
        lesions: Vec::new(),
    };
    let [lo, hi] = cfg.lesion_count_range;
    let count = rng.random_range(lo..=hi);
    let [rlo, rhi] = cfg.lesion_radius_range_vox;
    let min_radius = radii.iter().cloned().fold(f64::INFINITY, f64::min);
    for _ in 0..count {
        let change = draw_change(&mut rng, &cfg.change_profile);
        let r = if rhi > rlo {
            rng.random_range(rlo..=rhi)
        } else {
            rlo
        };
        let (radius_ti, radius_tj) = match change {
            LesionChange::Grow => (Some(r), Some(r * GROW_FACTOR)),
            LesionChange::Shrink => (Some(r), Some((r * SHRINK_FACTOR).max(1.0))),
            LesionChange::Appear => (None, Some(r)),
            LesionChange::Disappear => (Some(r), None),
            LesionChange::Static => (Some(r), Some(r)),
        };
        let extent = radius_ti.unwrap_or(0.0).max(radius_tj.unwrap_or(0.0));
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c =
                [0, 1, 2].map(|k| center[k] + rng.random_range(-1.0..1.0) * radii[k] * WM_EXTENT);
            // Centre in white matter; the whole lesion (at its larger radius)
            // stays clear of the grey-matter boundary.
            let rho = anatomy.rho(c);
            let fits = rho <= WM_EXTENT && rho + (extent + 1.0) / min_radius <= GM_EXTENT;
            let apart = anatomy.lesions.iter().all(|o| {
                let oe = o.radius_ti.unwrap_or(0.0).max(o.radius_tj.unwrap_or(0.0));
                dist(c, o.center) > extent + oe + 1.0
            });
            if fits && apart {
                anatomy.lesions.push(Lesion {
                    center: c,
                    radius_ti,
                    radius_tj,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Placement {
                subject,
                attempts: PLACEMENT_ATTEMPTS,
                config: serde_json::to_string(cfg).unwrap_or_default(),
            });
        }
    }
    Ok(anatomy)
}

/// Smooth displacement defined everywhere, scaled so that its largest
/// magnitude over the voxel grid equals the configured amplitude.
struct SmoothField {
    comps: Vec<SmoothNoise>,
    scale: f64,
}

/// Fixed-point iterations used to invert `a -> a + phi(a)`.
const INVERSE_ITERATIONS: usize = 12;

impl SmoothField {
    fn new(cfg: &SynthConfig, subject: usize) -> Self {
        let mut rng = subject_rng(cfg.seed, subject, STREAM_FIELD);
        let comps: Vec<SmoothNoise> = (0..3)
            .map(|_| SmoothNoise::new(&mut rng, 4, cfg.shape))
            .collect();
        let mut field = Self { comps, scale: 1.0 };
        if cfg.warp_amplitude_vox == 0.0 {
            field.scale = 0.0;
            return field;
        }
        let [d, h, w] = cfg.shape;
        let mut max_mag = 0.0f64;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = field.eval([z as f64, y as f64, x as f64]);
                    max_mag = max_mag.max(v.iter().map(|c| c * c).sum::<f64>().sqrt());
                }
            }
        }
        field.scale = if max_mag > 0.0 {
            cfg.warp_amplitude_vox / max_mag
        } else {
            0.0
        };
        field
    }

    fn eval(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| self.scale * self.comps[k].eval(p))
    }

    /// Anatomical point `a` with `a + phi(a) = q`.
    fn preimage(&self, q: [f64; 3]) -> [f64; 3] {
        if self.scale == 0.0 {
            return q;
        }
        let mut a = q;
        for _ in 0..INVERSE_ITERATIONS {
            let v = self.eval(a);
            a = [0, 1, 2].map(|k| q[k] - v[k]);
        }
        a
    }

    fn sample(&self, shape: [usize; 3]) -> DisplacementField3D {
        let [d, h, w] = shape;
        let mut data = Array4::<f32>::zeros((3, d, h, w));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = self.eval([z as f64, y as f64, x as f64]);
                    for k in 0..3 {
                        data[[k, z, y, x]] = v[k] as f32;
                    }
                }
            }
        }
        DisplacementField3D { data }
    }
}

/// Generates subject `subject_index` of the configured cohort.
pub fn generate_subject(cfg: &SynthConfig, subject_index: usize) -> Result<LongitudinalSample> {
    cfg.validate()?;
    let anatomy = build_anatomy(cfg, subject_index)?;
    let phi = SmoothField::new(cfg, subject_index);
    let field = phi.sample(cfg.shape);
    let shape = (cfg.shape[0], cfg.shape[1], cfg.shape[2]);
    let ip = &cfg.intensity;
    let mut noise_rng = subject_rng(cfg.seed, subject_index, STREAM_NOISE);
    let noise = Normal::new(0.0, ip.noise_sigma.max(0.0)).expect("finite sigma");

    let mut render = |frame: Frame| {
        let mut t1 = Array3::<f32>::zeros(shape);
        let mut flair = Array3::<f32>::zeros(shape);
        let mut mask = Array3::<f32>::zeros(shape);
        for z in 0..shape.0 {
            for y in 0..shape.1 {
                for x in 0..shape.2 {
                    let q = [z as f64, y as f64, x as f64];
                    let a = match frame {
                        Frame::Ti => q,
                        Frame::Tj => phi.preimage(q),
                    };
                    let (mut v1, mut v2, hard) = anatomy.render(a, frame, ip);
                    if anatomy.inside(a) && ip.noise_sigma > 0.0 {
                        v1 += noise.sample(&mut noise_rng);
                        v2 += noise.sample(&mut noise_rng);
                    }
                    t1[[z, y, x]] = v1 as f32;
                    flair[[z, y, x]] = v2 as f32;
                    mask[[z, y, x]] = if hard { 1.0 } else { 0.0 };
                }
            }
        }
        (t1, flair, mask)
    };
    let (t1_i, flair_i, mask_i) = render(Frame::Ti);
    let (t1_j, flair_j, mask_j) = render(Frame::Tj);
    let spacing = [1.0f32; 3];
    let vol = |a: Array3<f32>| Volume3D::new(a).map(|v| v.with_spacing(spacing));
    let mask = |a: Array3<f32>| Volume3D::mask(a).map(|v| v.with_spacing(spacing));
    Ok(LongitudinalSample::new(
        subject_id(subject_index),
        ScanPair {
            t1: vol(t1_i)?,
            flair: vol(flair_i)?,
        },
        ScanPair {
            t1: vol(t1_j)?,
            flair: vol(flair_j)?,
        },
        mask(mask_i)?,
        Some(mask(mask_j)?),
        Some(field),
    )?)
}

/// Subject counts `(train, val, test)` in proportion 3:1:3.
pub fn split_sizes(n_subjects: usize) -> Result<(usize, usize, usize)> {
    if n_subjects < 3 {
        return Err(config_err(
            "n_subjects",
            format!("need at least 3 subjects for a train/val/test split, got {n_subjects}"),
        ));
    }
    let n = n_subjects as f64;
    let val = ((n / 7.0).round() as usize).max(1);
    let train = ((3.0 * n / 7.0).round() as usize).max(1);
    if train + val >= n_subjects {
        return Err(config_err(
            "n_subjects",
            format!("{n_subjects} subjects leave no test subjects"),
        ));
    }
    Ok((train, val, n_subjects - train - val))
}

/// Generates every subject and a seeded, subject-disjoint 3:1:3 split.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n_train, n_val, _) = split_sizes(cfg.n_subjects)?;
    let subjects = (0..cfg.n_subjects)
        .map(|i| generate_subject(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..cfg.n_subjects).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_SPLIT);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let ids = |idx: &[usize]| {
        let mut v: Vec<String> = idx.iter().map(|&i| subject_id(i)).collect();
        v.sort();
        v
    };
    let split = Split {
        train: ids(&order[..n_train]),
        val: ids(&order[n_train..n_train + n_val]),
        test: ids(&order[n_train + n_val..]),
    };
    Ok(Dataset { subjects, split })
}

/// Number of voxels of a mask, for quick inspection.
pub fn mask_volume(mask: &Volume3D) -> usize {
    let mut n = 0;
    Zip::from(mask.data()).for_each(|&v| {
        if v != 0.0 {
            n += 1
        }
    });
    n
}
