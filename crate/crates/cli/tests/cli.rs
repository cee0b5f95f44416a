//! End-to-end behaviour of the `longiseg` binary on tiny synthetic data.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use longiseg::metrics::MetricReport;
use longiseg::volumes::dataset::Dataset;
use longiseg::volumes::read_nifti;

fn longiseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longiseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("LONGISEG_DEVICE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = longiseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_DATA: &str = r#"
shape = [20, 18, 22]
n_subjects = 4
lesion_count_range = [1, 2]
lesion_radius_range_vox = [1.0, 1.5]
seed = 5
"#;

const TINY_TRAIN: &str = r#"
learning_rate = 0.001
batch_size = 2
epochs = 2
steps_per_epoch = 3
seed = 3

[backbone]
first_conv_channels = 4
growth_rate = 2
layers_per_dense_block = 1
n_pool = 2
bottleneck_layers = 1
dropout_rate = 0.2
"#;

/// Tiny dataset plus training config in a fresh directory.
fn fixture() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let gen_cfg = tmp.path().join("gen.toml");
    std::fs::write(&gen_cfg, TINY_DATA).unwrap();
    let data = tmp.path().join("data");
    ok(&["generate", "--config", s(&gen_cfg), "--out", s(&data)]);
    let train_cfg = tmp.path().join("train.toml");
    std::fs::write(&train_cfg, TINY_TRAIN).unwrap();
    (tmp, data, train_cfg)
}

fn train(data: &Path, cfg: &Path, out: &Path, variant: &str) {
    ok(&[
        "train",
        "--config",
        s(cfg),
        "--data",
        s(data),
        "--out",
        s(out),
        "--variant",
        variant,
    ]);
}

fn stub(dir: &Path, json: &str) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("stub.json"), json).unwrap();
    dir.to_path_buf()
}

fn files_except_manifest(root: &Path) -> Vec<(String, Vec<u8>)> {
    longiseg_cli::manifest::list_files(root)
        .unwrap()
        .into_iter()
        .filter(|f| f != "manifest.json")
        .map(|f| {
            let bytes = std::fs::read(root.join(&f)).unwrap();
            (f, bytes)
        })
        .collect()
}

#[test]
fn generate_default_config_writes_seven_subjects_split_3_1_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    ok(&["generate", "--out", s(&out)]);
    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.subjects.len(), 7);
    assert_eq!(
        (
            ds.split.train.len(),
            ds.split.val.len(),
            ds.split.test.len()
        ),
        (3, 1, 3)
    );
    let m = longiseg_cli::manifest::RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(m.command, "generate");
    assert_eq!(m.status, longiseg_cli::manifest::RunStatus::Completed);
    assert!(m.outputs.contains(&"dataset.json".to_string()));
}

#[test]
fn generate_with_repeated_seed_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.toml");
    std::fs::write(&cfg, TINY_DATA).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["generate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["generate", "--config", s(&cfg), "--out", s(&b)]);
    let fa = files_except_manifest(&a);
    assert!(fa.len() > 10);
    assert_eq!(fa, files_except_manifest(&b));
}

#[test]
fn invalid_change_profile_exits_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.toml");
    std::fs::write(
        &cfg,
        "[change_profile]\ngrow = 0.3\nshrink = 0.2\nappear = 0.1\ndisappear = 0.1\nstatic = 0.5\n",
    )
    .unwrap();
    let out = longiseg(&[
        "generate",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("change_profile"));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn unsupported_device_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = longiseg(&[
        "generate",
        "--out",
        s(&tmp.path().join("x")),
        "--device",
        "cuda",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn static_training_logs_one_row_per_step_and_refuses_overwrite() {
    let (tmp, data, cfg) = fixture();
    let run = tmp.path().join("run");
    train(&data, &cfg, &run, "static");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "step,epoch,L_total,L_seg,L_sim,L_smooth");
    assert_eq!(lines.len() - 1, 6);
    assert!(
        lines[1].ends_with(",,"),
        "static rows leave registration terms blank: {}",
        lines[1]
    );
    assert!(run.join("checkpoints/last").is_dir());
    assert!(run.join("manifest.json").is_file());

    let again = longiseg(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--variant",
        "static",
    ]);
    assert_eq!(again.status.code(), Some(2));
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--variant",
        "static",
        "--force",
    ]);
    assert_eq!(
        std::fs::read_to_string(run.join("history.csv")).unwrap(),
        history
    );
}

#[test]
fn multitask_history_has_registration_columns() {
    let (tmp, data, cfg) = fixture();
    let run = tmp.path().join("run");
    train(&data, &cfg, &run, "multitask");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    for row in history.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 6);
        assert!(
            cells[4].parse::<f64>().is_ok() && cells[5].parse::<f64>().is_ok(),
            "{row}"
        );
    }
}

#[test]
fn resume_continues_the_step_counter_and_matches_an_uninterrupted_run() {
    let (tmp, data, cfg) = fixture();
    let full = tmp.path().join("full");
    train(&data, &cfg, &full, "static");
    let part = tmp.path().join("part");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&part),
        "--variant",
        "static",
        "--epochs",
        "1",
    ]);
    assert_eq!(
        std::fs::read_to_string(part.join("history.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    let last = part.join("checkpoints/last");
    ok(&[
        "train",
        "--resume",
        s(&last),
        "--epochs",
        "2",
        "--data",
        s(&data),
        "--out",
        s(&part),
    ]);
    for f in ["history.csv", "validation.csv"] {
        assert_eq!(
            std::fs::read_to_string(part.join(f)).unwrap(),
            std::fs::read_to_string(full.join(f)).unwrap(),
            "{f}"
        );
    }
    let m = longiseg_cli::manifest::RunManifest::load(&part.join("manifest.json")).unwrap();
    assert!(m.config["resume"].is_string());
}

#[test]
fn rerunning_from_a_manifest_reproduces_the_run() {
    let (tmp, data, cfg) = fixture();
    let a = tmp.path().join("a");
    train(&data, &cfg, &a, "static");
    let b = tmp.path().join("b");
    ok(&[
        "train",
        "--config",
        s(&a.join("manifest.json")),
        "--out",
        s(&b),
    ]);
    assert_eq!(
        std::fs::read_to_string(a.join("history.csv")).unwrap(),
        std::fs::read_to_string(b.join("history.csv")).unwrap()
    );
}

#[test]
fn training_without_a_dataset_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = longiseg(&[
        "train",
        "--data",
        s(&tmp.path().join("missing")),
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn evaluate_ranks_stubs_and_writes_consistent_reports() {
    let (tmp, data, _) = fixture();
    let perfect = stub(&tmp.path().join("perfect"), r#"{"kind": "reference"}"#);
    let empty = stub(
        &tmp.path().join("empty"),
        r#"{"kind": "constant", "value": 0.0}"#,
    );
    let out = tmp.path().join("eval");
    ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&empty),
        "--checkpoint",
        s(&perfect),
        "--out",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], "reference");
    assert_eq!(rows[0][9].parse::<f64>().unwrap(), 1.0);
    assert_eq!(rows[1][1], "constant");
    assert!(rows[1][9].parse::<f64>().unwrap() < 1.0);
    let table = std::fs::read_to_string(out.join("comparison.txt")).unwrap();
    assert!(table.find("reference").unwrap() < table.find("constant").unwrap());

    // Aggregate mean equals the average of the per-subject JSON reports.
    let ds = Dataset::load(&data).unwrap();
    let dir = out.join("reports/constant");
    let reports: Vec<MetricReport> = ds
        .split
        .test
        .iter()
        .map(|id| {
            let v: serde_json::Value = serde_json::from_str(
                &std::fs::read_to_string(dir.join(format!("{id}.json"))).unwrap(),
            )
            .unwrap();
            serde_json::from_value(v["report"].clone()).unwrap()
        })
        .collect();
    let n = reports.len() as f64;
    let agg = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mean: Vec<f64> = agg
        .lines()
        .find(|l| l.starts_with("mean,"))
        .unwrap()
        .split(',')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    let by_hand = [
        reports.iter().map(|r| r.dsc).sum::<f64>() / n,
        reports.iter().map(|r| r.ppv).sum::<f64>() / n,
        reports.iter().map(|r| r.ltpr).sum::<f64>() / n,
        reports.iter().map(|r| r.lfpr).sum::<f64>() / n,
        reports.iter().map(|r| r.vd).sum::<f64>() / n,
        reports.iter().map(|r| r.overall).sum::<f64>() / n,
    ];
    for (a, b) in mean.iter().zip(by_hand) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn evaluate_rejects_a_variant_mismatch() {
    let (tmp, data, cfg) = fixture();
    let run = tmp.path().join("run");
    train(&data, &cfg, &run, "static");
    let out = longiseg(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&run),
        "--variant",
        "multitask",
        "--out",
        s(&tmp.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected multitask_longitudinal"));
    let out = longiseg(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&run),
        "--config",
        s(&run.join("manifest.json")),
        "--out",
        s(&tmp.path().join("eval")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn segment_then_plot_every_figure() {
    let (tmp, data, cfg) = fixture();
    let run = tmp.path().join("run");
    train(&data, &cfg, &run, "static");
    let ds = Dataset::load(&data).unwrap();
    let subject = ds.split.test[0].clone();

    // Trained model: all segmentation outputs exist and have the subject's shape.
    let seg = tmp.path().join("seg");
    ok(&[
        "segment",
        "--checkpoint",
        s(&run),
        "--data",
        s(&data),
        "--subject",
        &subject,
        "--out",
        s(&seg),
    ]);
    let mask = read_nifti(&seg.join("mask.nii.gz")).unwrap();
    assert_eq!(mask.shape(), ds.get(&subject).unwrap().shape());
    assert!(read_nifti(&seg.join("probability.nii.gz")).is_ok());
    let timing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seg.join("timing.json")).unwrap()).unwrap();
    assert!(timing["seconds_total"].as_f64().unwrap() > 0.0);
    assert_eq!(
        timing["seconds_per_orientation"].as_object().unwrap().len(),
        3
    );

    // Loss curve: one point per logged step.
    let plots = tmp.path().join("plots");
    ok(&["plot", "--run", s(&run), "--out", s(&plots)]);
    let svg = std::fs::read_to_string(plots.join("loss_curve.svg")).unwrap();
    assert!(svg.contains(r#"data-series="L_total" data-points="6""#));

    // Perfect stub: the prediction contour equals the reference contour.
    let perfect = stub(&tmp.path().join("perfect"), r#"{"kind": "reference"}"#);
    let pseg = tmp.path().join("pseg");
    ok(&[
        "segment",
        "--checkpoint",
        s(&perfect),
        "--data",
        s(&data),
        "--subject",
        &subject,
        "--out",
        s(&pseg),
    ]);
    let overlay = tmp.path().join("overlay");
    ok(&[
        "plot",
        "--prediction",
        s(&pseg.join("mask.nii.gz")),
        "--data",
        s(&data),
        "--subject",
        &subject,
        "--out",
        s(&overlay),
    ]);
    let img = image::open(overlay.join("overlay.png")).unwrap().to_rgb8();
    let half = img.width() / 2;
    let mut contour_pixels = 0;
    for y in 0..img.height() {
        for x in 0..half {
            let gt = *img.get_pixel(x, y) == longiseg_cli::plot::GT_COLOUR;
            let pred = *img.get_pixel(x + half, y) == longiseg_cli::plot::PRED_COLOUR;
            assert_eq!(gt, pred, "contours differ at ({x}, {y})");
            contour_pixels += gt as usize;
        }
    }
    assert!(contour_pixels > 0, "the default slice shows a lesion");

    // Two evaluated methods: two groups of six bars.
    let eval = tmp.path().join("eval");
    ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&run),
        "--checkpoint",
        s(&perfect),
        "--out",
        s(&eval),
    ]);
    let bars = tmp.path().join("bars");
    ok(&["plot", "--evaluation", s(&eval), "--out", s(&bars)]);
    let svg = std::fs::read_to_string(bars.join("metrics_bar.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="bar""#).count(), 12);
    for group in ["static", "reference"] {
        assert_eq!(svg.matches(&format!(r#"data-group="{group}""#)).count(), 6);
    }
}

#[test]
fn plotting_an_empty_history_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(
        run.join("history.csv"),
        "step,epoch,L_total,L_seg,L_sim,L_smooth\n",
    )
    .unwrap();
    let out = longiseg(&[
        "plot",
        "--run",
        s(&run),
        "--out",
        s(&tmp.path().join("plots")),
    ]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(0));
}
