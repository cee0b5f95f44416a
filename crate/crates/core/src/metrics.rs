//! Segmentation evaluation: DSC, PPV, VD, lesion-wise TPR/FPR and the
//! weighted overall score.
//!
//! Degenerate conventions (empty prediction or ground truth):
//! * `|P| = 0`: PPV is 1 if `|G| = 0`, else 0.
//! * `|G| = 0`: DSC is 1 and VD is 0 if `|P| = 0`; otherwise DSC is 0 and VD is 1.
//! * no ground-truth lesions: LTPR is 1.
//! * no predicted lesions: LFPR is 0.
//!
//! A ground-truth lesion counts as detected when at least one of its voxels
//! overlaps the predicted foreground. Lesions are 26-connected components.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::volumes::Volume3D;

/// Text describing the conventions above; embedded in written reports.
pub const CONVENTIONS: &str = "metrics averaged per subject; 26-connected lesions; \
detection = >=1 overlapping voxel; |P|=0 -> PPV=1 iff |G|=0; |G|=0 -> DSC=1,VD=0 iff |P|=0 else DSC=0,VD=1; \
no gt lesions -> LTPR=1; no predicted lesions -> LFPR=0; VD clipped to 1 inside the overall score only";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan >= 1,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Labeled components: 0 is background, components are numbered `1..=count`
/// in raster order of their first voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub labels: Array3<u32>,
    pub count: usize,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Two-pass union-find labeling of the nonzero voxels of `mask`.
pub fn connected_components(mask: &Array3<f32>, connectivity: Connectivity) -> Components {
    let (d, h, w) = mask.dim();
    // Only neighbours that precede the voxel in raster order.
    let back: Vec<[isize; 3]> = connectivity
        .offsets()
        .into_iter()
        .filter(|o| (o[0], o[1], o[2]) < (0, 0, 0))
        .collect();
    let mut provisional = Array3::<u32>::zeros((d, h, w));
    let mut parent: Vec<u32> = vec![0];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask[[z, y, x]] == 0.0 {
                    continue;
                }
                let mut label = 0u32;
                for o in &back {
                    let (nz, ny, nx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    if nz < 0 || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let l = provisional[[nz as usize, ny as usize, nx as usize]];
                    if l == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = find(&mut parent, l);
                    } else {
                        let (a, b) = (find(&mut parent, label), find(&mut parent, l));
                        if a != b {
                            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                            parent[hi as usize] = lo;
                            label = lo;
                        }
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[[z, y, x]] = label;
            }
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut labels = Array3::<u32>::zeros((d, h, w));
    for (idx, &l) in provisional.indexed_iter() {
        if l == 0 {
            continue;
        }
        let root = find(&mut parent, l);
        if remap[root as usize] == 0 {
            count += 1;
            remap[root as usize] = count;
        }
        labels[idx] = remap[root as usize];
    }
    Components {
        labels,
        count: count as usize,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelMetrics {
    pub dsc: f64,
    pub ppv: f64,
    pub vd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct VoxelCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn voxel_counts(pred: &Array3<f32>, gt: &Array3<f32>) -> VoxelCounts {
    let mut c = VoxelCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

fn voxel_metrics_from(c: VoxelCounts) -> VoxelMetrics {
    let p = (c.tp + c.fp) as f64;
    let g = (c.tp + c.fn_) as f64;
    let tp = c.tp as f64;
    let ppv = if p == 0.0 {
        if g == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp / p
    };
    let (dsc, vd) = if g == 0.0 {
        if p == 0.0 {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        }
    } else {
        (2.0 * tp / (p + g), (p - g).abs() / g)
    };
    VoxelMetrics { dsc, ppv, vd }
}

/// DSC, PPV and relative volume difference of two binary volumes.
pub fn voxel_metrics(pred: &Volume3D, gt: &Volume3D) -> VoxelMetrics {
    assert_eq!(
        pred.shape(),
        gt.shape(),
        "prediction and ground truth shapes differ"
    );
    voxel_metrics_from(voxel_counts(pred.data(), gt.data()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LesionCounts {
    pub n_gt_lesions: usize,
    pub n_pred_lesions: usize,
    pub n_detected: usize,
    pub n_false_lesions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionMetrics {
    pub ltpr: f64,
    pub lfpr: f64,
    pub counts: LesionCounts,
}

fn overlapping_components(components: &Components, other: &Array3<f32>) -> usize {
    let mut hit = vec![false; components.count + 1];
    for (&l, &o) in components.labels.iter().zip(other.iter()) {
        if l != 0 && o != 0.0 {
            hit[l as usize] = true;
        }
    }
    hit.iter().filter(|&&b| b).count()
}

pub fn lesion_metrics_with(
    pred: &Array3<f32>,
    gt: &Array3<f32>,
    connectivity: Connectivity,
) -> LesionMetrics {
    assert_eq!(
        pred.dim(),
        gt.dim(),
        "prediction and ground truth shapes differ"
    );
    let gt_cc = connected_components(gt, connectivity);
    let pred_cc = connected_components(pred, connectivity);
    let n_detected = overlapping_components(&gt_cc, pred);
    let n_false = pred_cc.count - overlapping_components(&pred_cc, gt);
    let ltpr = if gt_cc.count == 0 {
        1.0
    } else {
        n_detected as f64 / gt_cc.count as f64
    };
    let lfpr = if pred_cc.count == 0 {
        0.0
    } else {
        n_false as f64 / pred_cc.count as f64
    };
    LesionMetrics {
        ltpr,
        lfpr,
        counts: LesionCounts {
            n_gt_lesions: gt_cc.count,
            n_pred_lesions: pred_cc.count,
            n_detected,
            n_false_lesions: n_false,
        },
    }
}

/// Lesion-wise true and false positive rates on 26-connected components.
pub fn lesion_metrics(pred: &Volume3D, gt: &Volume3D) -> LesionMetrics {
    lesion_metrics_with(pred.data(), gt.data(), Connectivity::TwentySix)
}

/// `0.125 DSC + 0.125 PPV + 0.25 (1 - VD) + 0.25 LTPR + 0.25 (1 - LFPR)`,
/// with VD clipped to `[0, 1]` first.
pub fn overall_score(dsc: f64, ppv: f64, vd: f64, ltpr: f64, lfpr: f64) -> f64 {
    let vd = vd.clamp(0.0, 1.0);
    0.125 * dsc + 0.125 * ppv + 0.25 * (1.0 - vd) + 0.25 * ltpr + 0.25 * (1.0 - lfpr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MetricCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_gt_lesions: usize,
    pub n_pred_lesions: usize,
    pub n_detected: usize,
    pub n_false_lesions: usize,
}

/// All metrics of one prediction/ground-truth pair. `vd` is the raw value;
/// only `overall` uses the clipped one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub ppv: f64,
    pub ltpr: f64,
    pub lfpr: f64,
    pub vd: f64,
    pub overall: f64,
    pub counts: MetricCounts,
}

impl MetricReport {
    pub fn values(&self) -> MetricValues {
        MetricValues {
            dsc: self.dsc,
            ppv: self.ppv,
            ltpr: self.ltpr,
            lfpr: self.lfpr,
            vd: self.vd,
            overall: self.overall,
        }
    }
}

pub fn evaluate_with(
    pred: &Array3<f32>,
    gt: &Array3<f32>,
    connectivity: Connectivity,
) -> MetricReport {
    let vc = voxel_counts(pred, gt);
    let vm = voxel_metrics_from(vc);
    let lm = lesion_metrics_with(pred, gt, connectivity);
    MetricReport {
        dsc: vm.dsc,
        ppv: vm.ppv,
        ltpr: lm.ltpr,
        lfpr: lm.lfpr,
        vd: vm.vd,
        overall: overall_score(vm.dsc, vm.ppv, vm.vd, lm.ltpr, lm.lfpr),
        counts: MetricCounts {
            tp: vc.tp,
            fp: vc.fp,
            fn_: vc.fn_,
            n_gt_lesions: lm.counts.n_gt_lesions,
            n_pred_lesions: lm.counts.n_pred_lesions,
            n_detected: lm.counts.n_detected,
            n_false_lesions: lm.counts.n_false_lesions,
        },
    }
}

/// Full report for a binary prediction against a binary ground truth.
pub fn evaluate(pred: &Volume3D, gt: &Volume3D) -> MetricReport {
    assert_eq!(
        pred.shape(),
        gt.shape(),
        "prediction and ground truth shapes differ"
    );
    evaluate_with(pred.data(), gt.data(), Connectivity::TwentySix)
}

/// The six headline numbers of a report, or an aggregate of them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricValues {
    pub dsc: f64,
    pub ppv: f64,
    pub ltpr: f64,
    pub lfpr: f64,
    pub vd: f64,
    pub overall: f64,
}

impl MetricValues {
    pub const NAMES: [&'static str; 6] = ["dsc", "ppv", "ltpr", "lfpr", "vd", "overall"];

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.dsc,
            self.ppv,
            self.ltpr,
            self.lfpr,
            self.vd,
            self.overall,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            dsc: a[0],
            ppv: a[1],
            ltpr: a[2],
            lfpr: a[3],
            vd: a[4],
            overall: a[5],
        }
    }
}

/// Per-subject mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n_subjects: usize,
    pub mean: MetricValues,
    pub std: MetricValues,
}

/// Averages reports per subject. Returns `None` for an empty slice.
pub fn summarize(reports: &[MetricReport]) -> Option<MetricSummary> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mut mean = [0f64; 6];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.values().as_array()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0f64; 6];
    for r in reports {
        for ((s, v), m) in var.iter_mut().zip(r.values().as_array()).zip(mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.map(|s| (s / n).sqrt());
    Some(MetricSummary {
        n_subjects: reports.len(),
        mean: MetricValues::from_array(mean),
        std: MetricValues::from_array(std),
    })
}

/// CSV with one row per subject followed by `mean` and `std` rows.
pub fn reports_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("subject,dsc,ppv,ltpr,lfpr,vd,overall\n");
    let fmt_row = |name: &str, v: [f64; 6]| {
        let cols: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        format!("{name},{}\n", cols.join(","))
    };
    for (name, r) in rows {
        out.push_str(&fmt_row(name, r.values().as_array()));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(s) = summarize(&reports) {
        out.push_str(&fmt_row("mean", s.mean.as_array()));
        out.push_str(&fmt_row("std", s.std.as_array()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask(shape: (usize, usize, usize), on: &[[usize; 3]]) -> Array3<f32> {
        let mut m = Array3::zeros(shape);
        for &i in on {
            m[i] = 1.0;
        }
        m
    }

    #[test]
    fn empty_mask_has_no_components() {
        let cc = connected_components(&Array3::zeros((4, 4, 4)), Connectivity::TwentySix);
        assert_eq!(cc.count, 0);
        assert!(cc.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn corner_neighbours_depend_on_connectivity() {
        let m = mask((3, 3, 3), &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count, 1);
        assert_eq!(connected_components(&m, Connectivity::Six).count, 2);
    }

    #[test]
    fn u_shape_merges_into_one_label() {
        // Two arms that only join at the far end force a union of two provisional labels.
        let mut on = vec![];
        for y in 0..4 {
            on.push([0, y, 0]);
            on.push([0, y, 3]);
        }
        on.extend([[0, 3, 1], [0, 3, 2]]);
        let cc = connected_components(&mask((1, 4, 4), &on), Connectivity::Six);
        assert_eq!(cc.count, 1);
        assert!(on.iter().all(|&i| cc.labels[i] == 1));
    }

    #[test]
    fn voxel_metric_closed_forms() {
        let p = Volume3D::mask(mask((1, 1, 3), &[[0, 0, 0], [0, 0, 1]])).unwrap();
        let g = Volume3D::mask(mask((1, 1, 3), &[[0, 0, 1], [0, 0, 2]])).unwrap();
        let m = voxel_metrics(&p, &g);
        assert_eq!((m.dsc, m.ppv), (0.5, 0.5));

        let mut pd = Array3::zeros((1, 1, 200));
        pd.slice_mut(ndarray::s![.., .., ..120]).fill(1.0);
        let mut gd = Array3::zeros((1, 1, 200));
        gd.slice_mut(ndarray::s![.., .., ..100]).fill(1.0);
        let m = voxel_metrics(&Volume3D::mask(pd).unwrap(), &Volume3D::mask(gd).unwrap());
        assert!((m.vd - 0.2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_conventions() {
        let z = Array3::zeros((2, 2, 2));
        let one = mask((2, 2, 2), &[[1, 1, 1]]);
        let r = evaluate_with(&z, &z, Connectivity::TwentySix);
        assert_eq!(
            (r.dsc, r.ppv, r.vd, r.ltpr, r.lfpr, r.overall),
            (1.0, 1.0, 0.0, 1.0, 0.0, 1.0)
        );
        let r = evaluate_with(&one, &z, Connectivity::TwentySix);
        assert_eq!(
            (r.dsc, r.ppv, r.vd, r.ltpr, r.lfpr),
            (0.0, 0.0, 1.0, 1.0, 1.0)
        );
        let r = evaluate_with(&z, &one, Connectivity::TwentySix);
        assert_eq!(
            (r.dsc, r.ppv, r.vd, r.ltpr, r.lfpr),
            (0.0, 0.0, 1.0, 0.0, 0.0)
        );
    }

    #[test]
    fn lesion_detection_cases() {
        // gt: two lesions far apart; pred overlaps only the first.
        let gt = mask((8, 8, 8), &[[1, 1, 1], [1, 1, 2], [6, 6, 6]]);
        let pred = mask((8, 8, 8), &[[1, 1, 2]]);
        let lm = lesion_metrics_with(&pred, &gt, Connectivity::TwentySix);
        assert_eq!(lm.ltpr, 0.5);
        assert_eq!(lm.counts.n_gt_lesions, 2);

        // pred: three components, one disjoint from gt.
        let pred = mask((8, 8, 8), &[[1, 1, 1], [6, 6, 6], [4, 0, 7]]);
        let lm = lesion_metrics_with(&pred, &gt, Connectivity::TwentySix);
        assert!((lm.lfpr - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(lm.counts.n_false_lesions, 1);

        let lm = lesion_metrics_with(&gt, &gt, Connectivity::TwentySix);
        assert_eq!((lm.ltpr, lm.lfpr), (1.0, 0.0));
    }

    #[test]
    fn overall_score_examples() {
        assert_eq!(overall_score(1.0, 1.0, 0.0, 1.0, 0.0), 1.0);
        assert!((overall_score(0.5, 0.5, 0.2, 0.6, 0.2) - 0.675).abs() < 1e-12);
        assert_eq!(overall_score(0.0, 0.0, 1.0, 0.0, 1.0), 0.0);
        // VD above 1 is clipped.
        assert_eq!(overall_score(0.0, 0.0, 3.5, 0.0, 1.0), 0.0);
    }

    #[test]
    fn dice_is_symmetric_ppv_is_not() {
        let a = mask((1, 1, 4), &[[0, 0, 0], [0, 0, 1], [0, 0, 2]]);
        let b = mask((1, 1, 4), &[[0, 0, 2]]);
        let ab = evaluate_with(&a, &b, Connectivity::TwentySix);
        let ba = evaluate_with(&b, &a, Connectivity::TwentySix);
        assert_eq!(ab.dsc, ba.dsc);
        assert_ne!(ab.ppv, ba.ppv);
    }

    #[test]
    fn summary_and_csv() {
        let z = Array3::zeros((2, 2, 2));
        let one = mask((2, 2, 2), &[[1, 1, 1]]);
        let r1 = evaluate_with(&z, &z, Connectivity::TwentySix);
        let r2 = evaluate_with(&z, &one, Connectivity::TwentySix);
        let s = summarize(&[r1, r2]).unwrap();
        assert_eq!(s.mean.dsc, 0.5);
        assert_eq!(s.std.dsc, 0.5);
        let csv = reports_csv(&[("a".into(), r1), ("b".into(), r2)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("mean,0.5,"));
        assert!(summarize(&[]).is_none());
    }
}
