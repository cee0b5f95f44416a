//! Random slice selection across subjects and orientations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volumes::{LongitudinalSample, SlicePlane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SliceSampling {
    /// Uniform over `(subject, plane, index)`.
    All,
    /// Uniform draw whose index is, with probability
    /// [`LESION_DRAW_PROBABILITY`], replaced by a random lesion-bearing index
    /// of the same subject and plane.
    #[default]
    LesionBiased,
}

pub const LESION_DRAW_PROBABILITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceRef {
    pub subject: usize,
    pub plane: SlicePlane,
    pub index: usize,
}

/// The sampler owns no generator; callers pass theirs so one seeded stream
/// drives the whole training run.
#[derive(Debug, Clone)]
pub struct SliceSampler {
    mode: SliceSampling,
    /// `(subject, plane, first global index, slice count)` blocks.
    blocks: Vec<(usize, SlicePlane, usize, usize)>,
    domain: usize,
    /// Lesion-bearing indices per block.
    lesion_slices: Vec<Vec<usize>>,
}

#[derive(Debug, thiserror::Error)]
#[error("cannot sample slices: {0}")]
pub struct SamplerError(pub String);

impl SliceSampler {
    pub fn new(
        subjects: &[LongitudinalSample],
        planes: &[SlicePlane],
        mode: SliceSampling,
    ) -> Result<Self, SamplerError> {
        if subjects.is_empty() {
            return Err(SamplerError("the dataset split is empty".into()));
        }
        if planes.is_empty() {
            return Err(SamplerError("no slice planes selected".into()));
        }
        let mut blocks = Vec::new();
        let mut lesion_slices = Vec::new();
        let mut domain = 0;
        for (s, sample) in subjects.iter().enumerate() {
            for &plane in planes {
                let mask = &sample.gt_mask_ti;
                let n = mask.plane_len(plane);
                blocks.push((s, plane, domain, n));
                domain += n;
                let hits = (0..n)
                    .filter(|&i| {
                        mask.slice(plane, i)
                            .map(|v| v.iter().any(|&x| x != 0.0))
                            .unwrap_or(false)
                    })
                    .collect();
                lesion_slices.push(hits);
            }
        }
        Ok(Self {
            mode,
            blocks,
            domain,
            lesion_slices,
        })
    }

    /// Number of distinct `(subject, plane, index)` triples.
    pub fn domain_size(&self) -> usize {
        self.domain
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> SliceRef {
        let g = rng.random_range(0..self.domain);
        let b = self.blocks.partition_point(|&(_, _, start, _)| start <= g) - 1;
        let (subject, plane, start, _) = self.blocks[b];
        let mut index = g - start;
        if self.mode == SliceSampling::LesionBiased {
            let biased = rng.random::<f64>() < LESION_DRAW_PROBABILITY;
            let hits = &self.lesion_slices[b];
            if biased && !hits.is_empty() {
                index = hits[rng.random_range(0..hits.len())];
            }
        }
        SliceRef {
            subject,
            plane,
            index,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::{ScanPair, Volume3D};
    use ndarray::Array3;
    use rand::SeedableRng;

    fn cube(n: usize, lesion_axial: Option<usize>) -> LongitudinalSample {
        let img = Volume3D::new(Array3::from_elem((n, n, n), 1.0)).unwrap();
        let mut mask = Array3::zeros((n, n, n));
        if let Some(z) = lesion_axial {
            mask[[z, 2, 3]] = 1.0;
            mask[[z, 2, 4]] = 1.0;
        }
        let scans = ScanPair {
            t1: img.clone(),
            flair: img,
        };
        LongitudinalSample::new(
            "s",
            scans.clone(),
            scans,
            Volume3D::mask(mask).unwrap(),
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn domain_counts_every_plane() {
        let s = SliceSampler::new(&[cube(8, None)], &SlicePlane::ALL, SliceSampling::All).unwrap();
        assert_eq!(s.domain_size(), 24);
    }

    #[test]
    fn uniform_mode_covers_domain() {
        let s = SliceSampler::new(
            &[cube(4, None), cube(4, None)],
            &SlicePlane::ALL,
            SliceSampling::All,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..2000 {
            let r = s.draw(&mut rng);
            seen.insert((r.subject, r.plane, r.index));
        }
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn same_seed_same_sequence() {
        let s = SliceSampler::new(
            &[cube(8, Some(3))],
            &SlicePlane::ALL,
            SliceSampling::LesionBiased,
        )
        .unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| s.draw(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn lesion_bias_frequency() {
        let s = SliceSampler::new(
            &[cube(8, Some(5))],
            &SlicePlane::ALL,
            SliceSampling::LesionBiased,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut axial, mut hits) = (0usize, 0usize);
        for _ in 0..1000 {
            let r = s.draw(&mut rng);
            if r.plane == SlicePlane::Axial {
                axial += 1;
                hits += usize::from(r.index == 5);
            }
        }
        // Expected hit rate 0.5 + 0.5 / 8 = 0.5625.
        let rate = hits as f64 / axial as f64;
        assert!(rate >= 0.4, "{rate} over {axial} axial draws");
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(SliceSampler::new(&[], &SlicePlane::ALL, SliceSampling::All).is_err());
        assert!(SliceSampler::new(&[cube(4, None)], &[], SliceSampling::All).is_err());
    }
}
