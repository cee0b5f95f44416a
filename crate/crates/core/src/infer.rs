//! 2.5D volumetric inference: every slice of each orientation is predicted,
//! the three probability volumes are averaged and the mean is thresholded.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::nets::{Model, NetError};
use crate::volumes::{
    extract_slice, insert_slice, pad_to_multiple, Layout, LongitudinalSample, SlicePlane,
    SliceStack, Volume3D, VolumeError,
};

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error("probability volumes disagree in shape: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("predictor returned {got} maps for {expected} slices")]
    CountMismatch { expected: usize, got: usize },
    #[error("predictor returned a {got:?} map for a {expected:?} slice")]
    MapShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("no reference mask for subject {0}")]
    UnknownSubject(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, InferError>;

/// Default decision threshold; a voxel is foreground when the fused
/// probability is strictly greater.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Slices per forward pass.
pub const DEFAULT_BATCH: usize = 16;

/// Anything that maps slice stacks to per-pixel lesion probabilities.
///
/// `predict_slices` receives stacks padded to a multiple of
/// [`size_multiple`](Self::size_multiple) and returns one map per stack with
/// the stack's (padded) extent.
pub trait SlicePredictor {
    fn layout(&self) -> Layout;

    fn size_multiple(&self) -> usize {
        1
    }

    fn predict_slices(&self, stacks: &[SliceStack]) -> Result<Vec<Array2<f32>>>;
}

impl SlicePredictor for Model {
    fn layout(&self) -> Layout {
        self.variant().layout()
    }

    fn size_multiple(&self) -> usize {
        self.downsampling_factor()
    }

    fn predict_slices(&self, stacks: &[SliceStack]) -> Result<Vec<Array2<f32>>> {
        Ok(self.predict(stacks)?.into_iter().map(|p| p.prob).collect())
    }
}

/// Which view a probability volume came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbSource {
    Plane(SlicePlane),
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub data: Array3<f32>,
    pub source: ProbSource,
}

impl ProbabilityVolume {
    pub fn shape(&self) -> [usize; 3] {
        let (d, h, w) = self.data.dim();
        [d, h, w]
    }

    pub fn to_volume(&self) -> Result<Volume3D> {
        Ok(Volume3D::new(self.data.clone())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferOptions {
    pub batch_size: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH,
        }
    }
}

/// Predicts every slice of `sample` along `plane` and reassembles the
/// probability volume.
pub fn predict_orientation<P: SlicePredictor + ?Sized>(
    predictor: &P,
    sample: &LongitudinalSample,
    plane: SlicePlane,
) -> Result<ProbabilityVolume> {
    predict_orientation_with(predictor, sample, plane, InferOptions::default(), None)
}

/// As [`predict_orientation`]; when `writes` is given, every voxel write is
/// counted there.
pub fn predict_orientation_with<P: SlicePredictor + ?Sized>(
    predictor: &P,
    sample: &LongitudinalSample,
    plane: SlicePlane,
    opts: InferOptions,
    mut writes: Option<&mut Array3<u32>>,
) -> Result<ProbabilityVolume> {
    let [d, h, w] = sample.shape();
    let mut out = Array3::<f32>::zeros((d, h, w));
    let n = sample.gt_mask_ti.plane_len(plane);
    let layout = predictor.layout();
    let multiple = predictor.size_multiple();
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(opts.batch_size.max(1)) {
        let stacks = chunk
            .iter()
            .map(|&i| {
                Ok(pad_to_multiple(
                    &extract_slice(sample, plane, i, layout)?,
                    multiple,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let maps = predictor.predict_slices(&stacks)?;
        if maps.len() != stacks.len() {
            return Err(InferError::CountMismatch {
                expected: stacks.len(),
                got: maps.len(),
            });
        }
        for (stack, map) in stacks.iter().zip(&maps) {
            let padded = (stack.height(), stack.width());
            if map.dim() != padded {
                return Err(InferError::MapShape {
                    expected: padded,
                    got: map.dim(),
                });
            }
            let crop = map.slice(s![..stack.crop.height, ..stack.crop.width]);
            insert_slice(&mut out, plane, stack.index, crop)?;
            if let Some(counts) = writes.as_deref_mut() {
                counts
                    .index_axis_mut(ndarray::Axis(plane.axis()), stack.index)
                    .mapv_inplace(|c| c + 1);
            }
        }
    }
    Ok(ProbabilityVolume {
        data: out,
        source: ProbSource::Plane(plane),
    })
}

/// Averages the three views and thresholds the mean strictly at `threshold`.
pub fn fuse_and_threshold(
    axial: &ProbabilityVolume,
    coronal: &ProbabilityVolume,
    sagittal: &ProbabilityVolume,
    threshold: f64,
) -> Result<(Volume3D, ProbabilityVolume)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(InferError::Threshold(threshold));
    }
    for other in [coronal, sagittal] {
        if other.shape() != axial.shape() {
            return Err(InferError::ShapeMismatch(axial.shape(), other.shape()));
        }
    }
    let mut fused = Array3::<f32>::zeros(axial.data.dim());
    let mut mask = Array3::<f32>::zeros(axial.data.dim());
    Zip::from(&mut fused)
        .and(&mut mask)
        .and(&axial.data)
        .and(&coronal.data)
        .and(&sagittal.data)
        .for_each(|f, m, &a, &c, &s| {
            let mean = (a as f64 + c as f64 + s as f64) / 3.0;
            *f = mean as f32;
            *m = if mean > threshold { 1.0 } else { 0.0 };
        });
    Ok((
        Volume3D::mask(mask)?,
        ProbabilityVolume {
            data: fused,
            source: ProbSource::Fused,
        },
    ))
}

/// Wall-clock cost of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds_total: f64,
    pub seconds_per_orientation: HashMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub mask: Volume3D,
    pub probabilities: ProbabilityVolume,
    pub timing: Timing,
}

/// Full 2.5D segmentation of one subject.
pub fn segment_subject<P: SlicePredictor + ?Sized>(
    predictor: &P,
    sample: &LongitudinalSample,
    threshold: f64,
) -> Result<Segmentation> {
    let start = Instant::now();
    let mut per = HashMap::new();
    let mut views = Vec::with_capacity(3);
    for plane in SlicePlane::ALL {
        let t = Instant::now();
        views.push(predict_orientation(predictor, sample, plane)?);
        per.insert(plane.name().to_string(), t.elapsed().as_secs_f64());
    }
    let (mask, probabilities) = fuse_and_threshold(&views[0], &views[1], &views[2], threshold)?;
    let mask = match sample.gt_mask_ti.spacing() {
        Some(sp) => mask.with_spacing(sp),
        None => mask,
    };
    Ok(Segmentation {
        mask,
        probabilities,
        timing: Timing {
            seconds_total: start.elapsed().as_secs_f64(),
            seconds_per_orientation: per,
        },
    })
}

/// Predicts the same probability everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor {
    pub value: f32,
    pub layout: Layout,
}

impl SlicePredictor for ConstantPredictor {
    fn layout(&self) -> Layout {
        self.layout
    }

    fn predict_slices(&self, stacks: &[SliceStack]) -> Result<Vec<Array2<f32>>> {
        Ok(stacks
            .iter()
            .map(|s| Array2::from_elem((s.height(), s.width()), self.value))
            .collect())
    }
}

/// Returns the stored reference mask of each slice's subject: a perfect
/// predictor, useful as an upper bound and for testing the evaluation path.
#[derive(Debug, Clone, Default)]
pub struct ReferencePredictor {
    masks: HashMap<String, Volume3D>,
}

impl ReferencePredictor {
    pub fn new<'a>(samples: impl IntoIterator<Item = &'a LongitudinalSample>) -> Self {
        Self {
            masks: samples
                .into_iter()
                .map(|s| (s.subject_id.clone(), s.gt_mask_ti.clone()))
                .collect(),
        }
    }
}

impl SlicePredictor for ReferencePredictor {
    fn layout(&self) -> Layout {
        Layout::Static
    }

    fn predict_slices(&self, stacks: &[SliceStack]) -> Result<Vec<Array2<f32>>> {
        stacks
            .iter()
            .map(|st| {
                let mask = self
                    .masks
                    .get(&st.subject_id)
                    .ok_or_else(|| InferError::UnknownSubject(st.subject_id.clone()))?;
                let slice = mask.slice(st.plane, st.index)?;
                let mut out = Array2::zeros((st.height(), st.width()));
                out.slice_mut(s![..st.crop.height, ..st.crop.width])
                    .assign(&slice);
                Ok(out)
            })
            .collect()
    }
}
