use std::path::Path;

use longiseg::metrics::MetricValues;
use longiseg::volumes::read_nifti;
use longiseg::volumes::{ChannelId, Modality, TimePoint};

use super::evaluate::COMPARISON_CSV;
use super::{in_run_dir, load_dataset};
use crate::error::{io_error, runtime, CliError, Result};
use crate::manifest::{absolute, RunManifest};
use crate::plot::{bar_chart_svg, history_series, line_chart_svg, overlay_png};
use crate::PlotArgs;

pub const LOSS_CURVE_FILE: &str = "loss_curve.svg";
pub const METRICS_BAR_FILE: &str = "metrics_bar.svg";
pub const OVERLAY_FILE: &str = "overlay.png";
/// Pixels per voxel in the overlay.
const OVERLAY_SCALE: u32 = 4;

fn read(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(CliError::runtime(format!(
            "{} does not exist",
            path.display()
        )));
    }
    std::fs::read_to_string(path).map_err(io_error(path))
}

/// `(label, six metric means)` rows of an evaluation's comparison CSV.
fn comparison_groups(csv: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::runtime("comparison is empty"))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::runtime(format!("comparison has no {name} column")))
    };
    let label = col("label")?;
    let metric_cols = MetricValues::NAMES
        .iter()
        .map(|m| col(m))
        .collect::<Result<Vec<_>>>()?;
    let mut groups = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let values = metric_cols
            .iter()
            .map(|&c| {
                cells
                    .get(c)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| CliError::runtime(format!("bad comparison row {line:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        groups.push((cells[label].to_string(), values));
    }
    if groups.is_empty() {
        return Err(CliError::runtime("comparison has no rows"));
    }
    Ok(groups)
}

/// Writes whichever figures the arguments ask for: the loss curve of a
/// training run, the metric bar chart of an evaluation and a gt/prediction
/// overlay of one slice.
pub fn cmd_plot(args: &PlotArgs) -> Result<()> {
    if args.run.is_none() && args.evaluation.is_none() && args.prediction.is_none() {
        return Err(CliError::config(
            "nothing to plot: pass --run, --evaluation or --prediction",
        ));
    }
    let overlay_inputs = match &args.prediction {
        Some(pred) => Some((
            pred,
            args.data
                .as_ref()
                .ok_or_else(|| CliError::config("--prediction needs --data"))?,
            args.subject
                .as_ref()
                .ok_or_else(|| CliError::config("--prediction needs --subject"))?,
        )),
        None => None,
    };
    let out = &args.common.out;
    let config = serde_json::json!({
        "run": args.run.as_deref().map(absolute),
        "evaluation": args.evaluation.as_deref().map(absolute),
        "prediction": args.prediction.as_deref().map(absolute),
        "data": args.data.as_deref().map(absolute),
        "subject": args.subject,
        "plane": args.plane,
        "index": args.index,
    });
    // Read every input before touching --out so a bad input leaves no run behind.
    let history = args
        .run
        .as_ref()
        .map(|run| {
            let series = history_series(&read(&run.join("history.csv"))?)
                .map_err(|e| CliError::runtime(format!("{}: {e}", run.display())))?;
            Ok::<_, CliError>(series)
        })
        .transpose()?;
    let comparison = args
        .evaluation
        .as_ref()
        .map(|dir| comparison_groups(&read(&dir.join(COMPARISON_CSV))?))
        .transpose()?;
    in_run_dir(
        out,
        args.common.force,
        RunManifest::start("plot", config, None),
        || {
            if let Some(series) = &history {
                let svg = line_chart_svg("Training losses", "step", "loss", series);
                let path = out.join(LOSS_CURVE_FILE);
                std::fs::write(&path, svg).map_err(io_error(&path))?;
            }
            if let Some(groups) = &comparison {
                let svg = bar_chart_svg("Mean metrics per method", &MetricValues::NAMES, groups);
                let path = out.join(METRICS_BAR_FILE);
                std::fs::write(&path, svg).map_err(io_error(&path))?;
            }
            if let Some((pred, data, subject)) = overlay_inputs {
                let dataset = load_dataset(data)?;
                let sample = dataset
                    .get(subject)
                    .ok_or_else(|| CliError::config(format!("dataset has no subject {subject}")))?;
                let prediction = read_nifti(pred).map_err(runtime)?;
                if prediction.shape() != sample.shape() {
                    return Err(CliError::config(format!(
                        "prediction shape {:?} differs from subject shape {:?}",
                        prediction.shape(),
                        sample.shape()
                    )));
                }
                let gt = &sample.gt_mask_ti;
                let plane = args.plane;
                let n = gt.plane_len(plane);
                let index = match args.index {
                    Some(i) if i >= n => {
                        return Err(CliError::config(format!(
                            "--index {i} out of range for {n} {plane} slices"
                        )));
                    }
                    Some(i) => i,
                    None => (0..n)
                        .max_by_key(|&i| {
                            let lesion = gt
                                .slice(plane, i)
                                .map(|s| s.iter().filter(|v| **v > 0.5).count())
                                .unwrap_or(0);
                            // Earliest slice wins ties.
                            (lesion, std::cmp::Reverse(i))
                        })
                        .unwrap_or(0),
                };
                let flair = sample.channel_volume(ChannelId {
                    time: TimePoint::Reference,
                    modality: Modality::Flair,
                });
                let img = overlay_png(
                    flair.slice(plane, index).map_err(runtime)?,
                    gt.slice(plane, index).map_err(runtime)?,
                    prediction.slice(plane, index).map_err(runtime)?,
                    OVERLAY_SCALE,
                );
                let path = out.join(OVERLAY_FILE);
                img.save(&path)
                    .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
                log::info!(
                    "overlay of {subject} {plane} slice {index} written to {}",
                    path.display()
                );
            }
            Ok(())
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparison_groups_reads_metric_columns_by_name() {
        let csv = "rank,label,kind,n_subjects,dsc,ppv,ltpr,lfpr,vd,overall\n1,a,static,2,0.1,0.2,0.3,0.4,0.5,0.6\n";
        let g = comparison_groups(csv).unwrap();
        assert_eq!(
            g,
            vec![("a".to_string(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6])]
        );
        assert!(comparison_groups("rank,label\n").is_err());
    }
}
