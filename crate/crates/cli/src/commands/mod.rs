pub mod evaluate;
pub mod generate;
pub mod plot;
pub mod segment;
pub mod train;

use std::path::{Path, PathBuf};

use longiseg::infer::{ConstantPredictor, ReferencePredictor, SlicePredictor};
use longiseg::nets::{Checkpoint, Model, ModelVariant};
use longiseg::trainer::{checkpoint_path, BEST_CHECKPOINT, LAST_CHECKPOINT};
use longiseg::volumes::dataset::Dataset;
use longiseg::volumes::{Layout, LongitudinalSample};
use serde::{Deserialize, Serialize};

use crate::error::{runtime, CliError, Result};
use crate::manifest::{prepare_out_dir, RunManifest};

/// Clears/creates `out`, writes a running manifest, runs `body` and records
/// its outcome and outputs in the manifest.
pub(crate) fn in_run_dir(
    out: &Path,
    force: bool,
    manifest: RunManifest,
    body: impl FnOnce() -> Result<()>,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    finish_run(out, manifest, body)
}

pub(crate) fn finish_run(
    out: &Path,
    mut manifest: RunManifest,
    body: impl FnOnce() -> Result<()>,
) -> Result<()> {
    manifest.write(out)?;
    let outcome = body();
    manifest.finish(out, &outcome)?;
    outcome
}

pub(crate) fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(CliError::runtime(format!(
            "dataset {} does not exist",
            root.display()
        )));
    }
    Dataset::load(root)
        .map_err(|e| CliError::runtime(format!("cannot load dataset {}: {e}", root.display())))
}

/// Brain-z-scored copies, as the trainer sees them.
pub(crate) fn normalized(samples: &[&LongitudinalSample]) -> Result<Vec<LongitudinalSample>> {
    samples
        .iter()
        .map(|s| s.normalized().map_err(runtime))
        .collect()
}

/// File marking a directory as a stub predictor fixture.
pub const STUB_FILE: &str = "stub.json";

/// Model-free predictors used as fixtures and reference points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StubSpec {
    /// Returns the reference mask: the perfect predictor.
    Reference,
    /// Returns `value` everywhere.
    Constant { value: f32 },
}

impl StubSpec {
    pub fn name(&self) -> &'static str {
        match self {
            StubSpec::Reference => "reference",
            StubSpec::Constant { .. } => "constant",
        }
    }
}

pub(crate) struct LoadedPredictor {
    pub predictor: Box<dyn SlicePredictor>,
    /// `None` for stubs.
    pub variant: Option<ModelVariant>,
    /// Checkpoint or stub directory actually read.
    pub source: PathBuf,
    pub kind: String,
}

/// Resolves a stub fixture, a run directory (its best checkpoint, else its
/// last) or a checkpoint directory. `samples` back the reference stub.
pub(crate) fn load_predictor(
    path: &Path,
    samples: &[LongitudinalSample],
) -> Result<LoadedPredictor> {
    let stub = path.join(STUB_FILE);
    if stub.is_file() {
        let text = std::fs::read_to_string(&stub).map_err(crate::error::io_error(&stub))?;
        let spec: StubSpec = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", stub.display())))?;
        let predictor: Box<dyn SlicePredictor> = match spec {
            StubSpec::Reference => Box::new(ReferencePredictor::new(samples)),
            StubSpec::Constant { value } => Box::new(ConstantPredictor {
                value,
                layout: Layout::Static,
            }),
        };
        return Ok(LoadedPredictor {
            predictor,
            variant: None,
            source: path.to_path_buf(),
            kind: spec.name().to_string(),
        });
    }
    let dir = if path.join("checkpoints").is_dir() {
        let best = checkpoint_path(path, BEST_CHECKPOINT);
        if best.is_dir() {
            best
        } else {
            checkpoint_path(path, LAST_CHECKPOINT)
        }
    } else {
        path.to_path_buf()
    };
    if !dir.is_dir() {
        return Err(CliError::runtime(format!(
            "checkpoint {} does not exist",
            dir.display()
        )));
    }
    let ckpt =
        Checkpoint::load(&dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    let model = Model::from_checkpoint(&ckpt)
        .map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    let variant = model.variant();
    Ok(LoadedPredictor {
        predictor: Box::new(model),
        variant: Some(variant),
        source: dir,
        kind: variant.name().to_string(),
    })
}
