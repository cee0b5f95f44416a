//! Volume and slice data model.
//!
//! Axis convention, used everywhere in the crate: volumes are indexed
//! `(D, H, W)` in row-major order. The axial plane fixes `D`, the coronal
//! plane fixes `H` and the sagittal plane fixes `W`.

pub mod dataset;
mod io;

pub use io::{
    load_volume, read_nifti, read_raw, read_raw_volume, save_volume, write_nifti, write_raw,
    write_raw_volume, RawSidecar,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("volume contains a non-finite value at {0:?}")]
    NonFinite([usize; 3]),
    #[error("volume axis {axis} has zero length")]
    EmptyAxis { axis: usize },
    #[error("mask volume contains non-binary value {value} at {index:?}")]
    NonBinaryMask { value: f32, index: [usize; 3] },
    #[error("shape mismatch: expected {expected:?}, got {got:?} ({what})")]
    ShapeMismatch {
        expected: [usize; 3],
        got: [usize; 3],
        what: String,
    },
    #[error("{plane} slice index {index} out of range (must be < {bound})")]
    SliceOutOfRange {
        plane: SlicePlane,
        index: usize,
        bound: usize,
    },
    #[error("cannot normalize volume: zero variance")]
    ZeroVariance,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// A scalar 3D grid: one modality of one scan, or a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    data: Array3<f32>,
    spacing: Option<[f32; 3]>,
    is_mask: bool,
}

impl Volume3D {
    /// Intensity volume. Every value must be finite and every axis non-empty.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        check_axes(data.shape())?;
        if let Some((idx, _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(VolumeError::NonFinite([idx.0, idx.1, idx.2]));
        }
        Ok(Self {
            data,
            spacing: None,
            is_mask: false,
        })
    }

    /// Binary mask volume; values must be exactly 0 or 1.
    pub fn mask(data: Array3<f32>) -> Result<Self> {
        check_axes(data.shape())?;
        if let Some((idx, &value)) = data.indexed_iter().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(VolumeError::NonBinaryMask {
                value,
                index: [idx.0, idx.1, idx.2],
            });
        }
        Ok(Self {
            data,
            spacing: None,
            is_mask: true,
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            data: Array3::zeros(shape),
            spacing: None,
            is_mask: false,
        }
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = Some(spacing);
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> Option<[f32; 3]> {
        self.spacing
    }

    pub fn is_mask(&self) -> bool {
        self.is_mask
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of voxels different from zero.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Extent of the volume along the axis that `plane` fixes.
    pub fn plane_len(&self, plane: SlicePlane) -> usize {
        self.data.len_of(Axis(plane.axis()))
    }

    /// 2D cross-section at `index` along the axis fixed by `plane`.
    pub fn slice(&self, plane: SlicePlane, index: usize) -> Result<ArrayView2<'_, f32>> {
        let bound = self.plane_len(plane);
        if index >= bound {
            return Err(VolumeError::SliceOutOfRange {
                plane,
                index,
                bound,
            });
        }
        Ok(self.data.index_axis(Axis(plane.axis()), index))
    }
}

fn check_axes(shape: &[usize]) -> Result<()> {
    match shape.iter().position(|&n| n == 0) {
        Some(axis) => Err(VolumeError::EmptyAxis { axis }),
        None => Ok(()),
    }
}

/// Ground-truth 3D displacement, component axis first: `(3, D, H, W)` in voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField3D {
    pub data: Array4<f32>,
}

impl DisplacementField3D {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            data: Array4::zeros((3, shape[0], shape[1], shape[2])),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Largest displacement magnitude over all voxels.
    pub fn max_magnitude(&self) -> f32 {
        let [d, h, w] = self.shape();
        let mut best = 0f32;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let m = (0..3)
                        .map(|c| self.data[[c, z, y, x]].powi(2))
                        .sum::<f32>()
                        .sqrt();
                    best = best.max(m);
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlicePlane {
    Axial,
    Coronal,
    Sagittal,
}

impl SlicePlane {
    pub const ALL: [SlicePlane; 3] = [SlicePlane::Axial, SlicePlane::Coronal, SlicePlane::Sagittal];

    /// Volume axis held fixed by this plane.
    pub fn axis(self) -> usize {
        match self {
            SlicePlane::Axial => 0,
            SlicePlane::Coronal => 1,
            SlicePlane::Sagittal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SlicePlane::Axial => "axial",
            SlicePlane::Coronal => "coronal",
            SlicePlane::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for SlicePlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SlicePlane {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(SlicePlane::Axial),
            "coronal" => Ok(SlicePlane::Coronal),
            "sagittal" => Ok(SlicePlane::Sagittal),
            other => Err(VolumeError::Invalid(format!("unknown plane {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::T1, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::Flair => "flair",
        }
    }
}

/// `Reference` is t_i (the segmented, fixed time-point); `Other` is t_j.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimePoint {
    Reference,
    Other,
}

impl TimePoint {
    /// Directory name used on disk.
    pub fn dir_name(self) -> &'static str {
        match self {
            TimePoint::Reference => "t0",
            TimePoint::Other => "t1",
        }
    }
}

/// T1 and FLAIR volumes of one time-point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPair {
    pub t1: Volume3D,
    pub flair: Volume3D,
}

impl ScanPair {
    pub fn get(&self, modality: Modality) -> &Volume3D {
        match modality {
            Modality::T1 => &self.t1,
            Modality::Flair => &self.flair,
        }
    }

    pub fn map(&self, f: impl Fn(&Volume3D) -> Result<Volume3D>) -> Result<ScanPair> {
        Ok(ScanPair {
            t1: f(&self.t1)?,
            flair: f(&self.flair)?,
        })
    }
}

/// Two rigidly pre-aligned time-points of one subject plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalSample {
    pub subject_id: String,
    pub ti: ScanPair,
    pub tj: ScanPair,
    pub gt_mask_ti: Volume3D,
    pub gt_mask_tj: Option<Volume3D>,
    pub gt_field: Option<DisplacementField3D>,
}

impl LongitudinalSample {
    /// Builds a sample, checking that all member volumes share one shape and
    /// that the masks are binary.
    pub fn new(
        subject_id: impl Into<String>,
        ti: ScanPair,
        tj: ScanPair,
        gt_mask_ti: Volume3D,
        gt_mask_tj: Option<Volume3D>,
        gt_field: Option<DisplacementField3D>,
    ) -> Result<Self> {
        let sample = Self {
            subject_id: subject_id.into(),
            ti,
            tj,
            gt_mask_ti,
            gt_mask_tj,
            gt_field,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.shape();
        let mut members: Vec<(&str, [usize; 3])> = vec![
            ("t_i t1", self.ti.t1.shape()),
            ("t_i flair", self.ti.flair.shape()),
            ("t_j t1", self.tj.t1.shape()),
            ("t_j flair", self.tj.flair.shape()),
            ("gt_mask_ti", self.gt_mask_ti.shape()),
        ];
        if let Some(m) = &self.gt_mask_tj {
            members.push(("gt_mask_tj", m.shape()));
        }
        if let Some(f) = &self.gt_field {
            members.push(("gt_field", f.shape()));
        }
        for (what, got) in members {
            if got != expected {
                return Err(VolumeError::ShapeMismatch {
                    expected,
                    got,
                    what: what.to_string(),
                });
            }
        }
        for (what, m) in [
            ("gt_mask_ti", Some(&self.gt_mask_ti)),
            ("gt_mask_tj", self.gt_mask_tj.as_ref()),
        ] {
            if let Some(m) = m {
                if !m.is_mask() {
                    return Err(VolumeError::Invalid(format!(
                        "{what} is not flagged as a mask"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.ti.t1.shape()
    }

    pub fn scans(&self, time: TimePoint) -> &ScanPair {
        match time {
            TimePoint::Reference => &self.ti,
            TimePoint::Other => &self.tj,
        }
    }

    pub fn channel_volume(&self, channel: ChannelId) -> &Volume3D {
        self.scans(channel.time).get(channel.modality)
    }

    /// Copy of the sample with every scan z-scored over its brain region.
    pub fn normalized(&self) -> Result<Self> {
        Ok(Self {
            subject_id: self.subject_id.clone(),
            ti: self.ti.map(normalize_brain)?,
            tj: self.tj.map(normalize_brain)?,
            gt_mask_ti: self.gt_mask_ti.clone(),
            gt_mask_tj: self.gt_mask_tj.clone(),
            gt_field: self.gt_field.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelId {
    pub time: TimePoint,
    pub modality: Modality,
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = match self.time {
            TimePoint::Reference => "t_i",
            TimePoint::Other => "t_j",
        };
        write!(f, "{}@{t}", self.modality.name())
    }
}

const STATIC_CHANNELS: [ChannelId; 2] = [
    ChannelId {
        time: TimePoint::Reference,
        modality: Modality::T1,
    },
    ChannelId {
        time: TimePoint::Reference,
        modality: Modality::Flair,
    },
];

const LONGITUDINAL_CHANNELS: [ChannelId; 4] = [
    ChannelId {
        time: TimePoint::Reference,
        modality: Modality::T1,
    },
    ChannelId {
        time: TimePoint::Reference,
        modality: Modality::Flair,
    },
    ChannelId {
        time: TimePoint::Other,
        modality: Modality::T1,
    },
    ChannelId {
        time: TimePoint::Other,
        modality: Modality::Flair,
    },
];

/// Channel layout of a [`SliceStack`].
///
/// * `Static`: `[T1@t_i, FLAIR@t_i]`
/// * `Longitudinal`: `[T1@t_i, FLAIR@t_i, T1@t_j, FLAIR@t_j]`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Static,
    Longitudinal,
}

impl Layout {
    pub fn channels(self) -> &'static [ChannelId] {
        match self {
            Layout::Static => &STATIC_CHANNELS,
            Layout::Longitudinal => &LONGITUDINAL_CHANNELS,
        }
    }

    pub fn n_channels(self) -> usize {
        self.channels().len()
    }
}

/// Spatial extent of a slice before padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

/// Multi-channel 2D image `(C, h, w)` cut from a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub data: Array3<f32>,
    pub layout: Layout,
    pub plane: SlicePlane,
    pub index: usize,
    pub subject_id: String,
    pub crop: CropRecord,
}

impl SliceStack {
    pub fn channels(&self) -> &'static [ChannelId] {
        self.layout.channels()
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), c)
    }

    /// Splits the stack into one 2D image per channel.
    pub fn unstack(&self) -> Vec<Array2<f32>> {
        self.data.outer_iter().map(|c| c.to_owned()).collect()
    }

    /// Removes padding, restoring the extent recorded in `crop`.
    pub fn cropped(&self) -> SliceStack {
        SliceStack {
            data: self
                .data
                .slice(s![.., ..self.crop.height, ..self.crop.width])
                .to_owned(),
            crop: self.crop,
            layout: self.layout,
            plane: self.plane,
            index: self.index,
            subject_id: self.subject_id.clone(),
        }
    }
}

/// Stacks equally-shaped 2D channels into a `(C, h, w)` array.
pub fn stack_channels(channels: &[ArrayView2<'_, f32>]) -> Result<Array3<f32>> {
    let first = channels
        .first()
        .ok_or_else(|| VolumeError::Invalid("no channels to stack".into()))?;
    let (h, w) = first.dim();
    let mut out = Array3::zeros((channels.len(), h, w));
    for (c, ch) in channels.iter().enumerate() {
        if ch.dim() != (h, w) {
            return Err(VolumeError::Invalid(format!(
                "channel {c} has shape {:?}, expected {:?}",
                ch.dim(),
                (h, w)
            )));
        }
        out.index_axis_mut(Axis(0), c).assign(ch);
    }
    Ok(out)
}

/// Cross-section of every channel of `layout` at `index` along `plane`.
pub fn extract_slice(
    sample: &LongitudinalSample,
    plane: SlicePlane,
    index: usize,
    layout: Layout,
) -> Result<SliceStack> {
    let views = layout
        .channels()
        .iter()
        .map(|&ch| sample.channel_volume(ch).slice(plane, index))
        .collect::<Result<Vec<_>>>()?;
    let data = stack_channels(&views)?;
    let (_, height, width) = data.dim();
    Ok(SliceStack {
        data,
        layout,
        plane,
        index,
        subject_id: sample.subject_id.clone(),
        crop: CropRecord { height, width },
    })
}

/// Writes a 2D cross-section back into `volume` at `index` along `plane`.
pub fn insert_slice(
    volume: &mut Array3<f32>,
    plane: SlicePlane,
    index: usize,
    slice: ArrayView2<'_, f32>,
) -> Result<()> {
    let bound = volume.len_of(Axis(plane.axis()));
    if index >= bound {
        return Err(VolumeError::SliceOutOfRange {
            plane,
            index,
            bound,
        });
    }
    let mut target = volume.index_axis_mut(Axis(plane.axis()), index);
    if target.dim() != slice.dim() {
        return Err(VolumeError::Invalid(format!(
            "slice shape {:?} does not match {plane} cross-section {:?}",
            slice.dim(),
            target.dim()
        )));
    }
    target.assign(&slice);
    Ok(())
}

fn z_score<'a>(values: impl Iterator<Item = &'a f32> + Clone) -> Result<(f64, f64)> {
    let (n, sum) = values
        .clone()
        .fold((0usize, 0f64), |(n, s), &v| (n + 1, s + v as f64));
    if n == 0 {
        return Err(VolumeError::ZeroVariance);
    }
    let mean = sum / n as f64;
    let var = values.map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 || !var.is_finite() {
        return Err(VolumeError::ZeroVariance);
    }
    Ok((mean, var.sqrt()))
}

/// Z-scores every voxel of an intensity volume (population standard deviation).
pub fn normalize_volume(v: &Volume3D) -> Result<Volume3D> {
    if v.is_mask() {
        return Err(VolumeError::Invalid(
            "cannot normalize a mask volume".into(),
        ));
    }
    let (mean, std) = z_score(v.data.iter())?;
    let data = v.data.mapv(|x| ((x as f64 - mean) / std) as f32);
    Ok(Volume3D {
        data,
        spacing: v.spacing,
        is_mask: false,
    })
}

/// Z-scores the brain region (nonzero voxels) of a skull-stripped volume;
/// background voxels stay exactly zero.
pub fn normalize_brain(v: &Volume3D) -> Result<Volume3D> {
    if v.is_mask() {
        return Err(VolumeError::Invalid(
            "cannot normalize a mask volume".into(),
        ));
    }
    let (mean, std) = z_score(v.data.iter().filter(|&&x| x != 0.0))?;
    let data = v.data.mapv(|x| {
        if x == 0.0 {
            0.0
        } else {
            ((x as f64 - mean) / std) as f32
        }
    });
    Ok(Volume3D {
        data,
        spacing: v.spacing,
        is_mask: false,
    })
}

/// Smallest multiple of `m` that is `>= n`.
pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Zero-pads a 2D array at the bottom/right to `(height, width)`.
pub fn pad2d(a: ArrayView2<'_, f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = a.dim();
    assert!(height >= h && width >= w, "pad target smaller than input");
    let mut out = Array2::zeros((height, width));
    out.slice_mut(s![..h, ..w]).assign(&a);
    out
}

/// Zero-pads the stack at the bottom/right so both spatial extents become
/// multiples of `m`. The pre-padding extent is kept in `crop`, so
/// `pad_to_multiple(s, m).cropped() == s`. Padding an already padded stack
/// keeps its original crop record.
pub fn pad_to_multiple(s: &SliceStack, m: usize) -> SliceStack {
    let m = m.max(1);
    pad_to_extent(s, round_up(s.height(), m), round_up(s.width(), m))
}

/// Zero-pads the stack at the bottom/right to exactly `(height, width)`.
pub fn pad_to_extent(s: &SliceStack, height: usize, width: usize) -> SliceStack {
    let (c, h, w) = s.data.dim();
    let mut data = Array3::zeros((c, height.max(h), width.max(w)));
    data.slice_mut(s![.., ..h, ..w]).assign(&s.data);
    SliceStack {
        data,
        layout: s.layout,
        plane: s.plane,
        index: s.index,
        subject_id: s.subject_id.clone(),
        crop: s.crop,
    }
}
