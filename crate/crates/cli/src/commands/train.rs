use std::path::Path;

use longiseg::nets::Checkpoint;
use longiseg::trainer::{TrainConfig, Trainer};
use longiseg::volumes::dataset::SplitName;

use super::{finish_run, in_run_dir, load_dataset};
use crate::config::{load_train_file, TrainFile, TrainRunConfig};
use crate::error::{runtime, CliError, Result};
use crate::manifest::{absolute, RunManifest, MANIFEST_FILE};
use crate::TrainArgs;

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(CliError::runtime(format!(
            "checkpoint {} does not exist",
            dir.display()
        )));
    }
    Checkpoint::load(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

/// Config file (or the resumed checkpoint's config), then flags on top.
fn resolve(args: &TrainArgs, resumed: Option<&Checkpoint>) -> Result<TrainRunConfig> {
    let file = match (&args.config, resumed) {
        (Some(path), _) => load_train_file(path)?,
        (None, Some(ckpt)) => TrainFile {
            train: TrainConfig::from_checkpoint(ckpt)?,
            data: None,
        },
        (None, None) => TrainFile {
            train: TrainConfig::default(),
            data: None,
        },
    };
    let mut train = file.train;
    if let Some(v) = args.variant {
        train.variant = v;
    }
    if let Some(s) = args.seed {
        train.seed = s;
    }
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(s) = args.steps_per_epoch {
        train.steps_per_epoch = s;
    }
    if let Some(lr) = args.learning_rate {
        train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    train.validate()?;
    let data =
        args.data.clone().or(file.data).ok_or_else(|| {
            CliError::config("no dataset: pass --data or set `data` in the config")
        })?;
    Ok(TrainRunConfig {
        data: absolute(&data),
        train,
        resume: args.resume.as_deref().map(absolute),
    })
}

/// Trains on the dataset's train split, validating on its val split, and
/// writes checkpoints, `history.csv`, `validation.csv` and `timing.csv`.
///
/// With `--resume`, `--out` may be the directory of the run being continued;
/// its logs are rewritten with the full history.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let resumed = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let run = resolve(args, resumed.as_ref())?;
    let out = &args.common.out;
    let manifest = RunManifest::start(
        "train",
        serde_json::to_value(&run).expect("train config serializes"),
        Some(run.train.seed),
    );
    let dataset = load_dataset(&run.data)?;
    let split = |name| -> Result<Vec<_>> {
        Ok(dataset
            .split_samples(name)
            .map_err(runtime)?
            .into_iter()
            .cloned()
            .collect())
    };
    let train = split(SplitName::Train)?;
    let val = split(SplitName::Val)?;
    let body = || {
        let mut trainer = match &resumed {
            Some(ckpt) => Trainer::resume(run.train.clone(), &train, &val, ckpt)?,
            None => Trainer::new(run.train.clone(), &train, &val)?,
        };
        log::info!(
            "training {} for {} steps ({} train / {} val subjects), starting at step {}",
            run.train.variant,
            run.train.total_steps(),
            train.len(),
            val.len(),
            trainer.steps_done()
        );
        trainer.run(Some(out))?;
        if let Some(best) = trainer.best() {
            log::info!(
                "best validation overall score {:.4} at step {}",
                best.overall,
                best.step
            );
        }
        Ok(())
    };
    let continuing = resumed.is_some() && out.join(MANIFEST_FILE).is_file();
    if continuing {
        finish_run(out, manifest, body)
    } else {
        in_run_dir(out, args.common.force, manifest, body)
    }
}
