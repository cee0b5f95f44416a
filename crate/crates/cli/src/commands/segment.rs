use longiseg::infer::segment_subject;
use longiseg::metrics::evaluate;
use longiseg::volumes::write_nifti;
use serde::Serialize;

use super::{in_run_dir, load_dataset, load_predictor};
use crate::error::{io_error, runtime, CliError, Result};
use crate::manifest::{absolute, RunManifest};
use crate::SegmentArgs;

pub const MASK_FILE: &str = "mask.nii.gz";
pub const PROBABILITY_FILE: &str = "probability.nii.gz";
pub const TIMING_FILE: &str = "timing.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Serialize)]
struct TimingReport<'a> {
    subject: &'a str,
    threshold: f64,
    #[serde(flatten)]
    timing: &'a longiseg::infer::Timing,
}

/// Segments one subject: fused probability and binary mask volumes, the
/// inference timing and, since datasets carry a reference mask, its metrics.
pub fn cmd_segment(args: &SegmentArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(CliError::config(format!(
            "--threshold must lie in [0, 1], got {}",
            args.threshold
        )));
    }
    let dataset = load_dataset(&args.data)?;
    let sample = dataset
        .get(&args.subject)
        .ok_or_else(|| {
            CliError::config(format!(
                "dataset {} has no subject {}",
                args.data.display(),
                args.subject
            ))
        })?
        .normalized()
        .map_err(runtime)?;
    let predictor = load_predictor(&args.checkpoint, std::slice::from_ref(&sample))?;
    let out = &args.common.out;
    let config = serde_json::json!({
        "checkpoint": absolute(&args.checkpoint),
        "data": absolute(&args.data),
        "subject": args.subject,
        "threshold": args.threshold,
    });
    in_run_dir(
        out,
        args.common.force,
        RunManifest::start("segment", config, None),
        || {
            let seg = segment_subject(predictor.predictor.as_ref(), &sample, args.threshold)
                .map_err(runtime)?;
            write_nifti(&out.join(MASK_FILE), &seg.mask).map_err(runtime)?;
            let prob = seg.probabilities.to_volume().map_err(runtime)?;
            let prob = match sample.gt_mask_ti.spacing() {
                Some(sp) => prob.with_spacing(sp),
                None => prob,
            };
            write_nifti(&out.join(PROBABILITY_FILE), &prob).map_err(runtime)?;
            let timing = TimingReport {
                subject: &sample.subject_id,
                threshold: args.threshold,
                timing: &seg.timing,
            };
            let path = out.join(TIMING_FILE);
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&timing).expect("timing serializes"),
            )
            .map_err(io_error(&path))?;
            let report = evaluate(&seg.mask, &sample.gt_mask_ti);
            let path = out.join(METRICS_FILE);
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&report).expect("report serializes"),
            )
            .map_err(io_error(&path))?;
            log::info!(
                "segmented {} in {:.2}s: {} lesion voxels, overall {:.4}",
                sample.subject_id,
                seg.timing.seconds_total,
                seg.mask.count_nonzero(),
                report.overall
            );
            Ok(())
        },
    )
}
