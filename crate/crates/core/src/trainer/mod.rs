//! Training loop shared by every model variant.
//!
//! One [`Trainer`] owns the model, the optimizer and a single seeded
//! generator that drives slice sampling and dropout, so a run is a pure
//! function of its config, seed and data. Checkpoints capture all three,
//! which makes resuming indistinguishable from an uninterrupted run.

mod optim;
mod sampler;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{Amsgrad, AmsgradConfig};
pub use sampler::{SamplerError, SliceRef, SliceSampler, SliceSampling, LESION_DRAW_PROBABILITY};

use crate::infer::{segment_subject, InferError, SlicePredictor};
use crate::losses::{self, LossConfig, LossError};
use crate::metrics::{self, MetricReport, MetricSummary};
use crate::nets::{
    stacks_to_tensor, BackboneConfig, Checkpoint, InitOptions, Mode, Model, ModelVariant, NetError,
    Param, ParamKind,
};
use crate::volumes::dataset::{Dataset, SplitName};
use crate::volumes::{
    extract_slice, pad2d, pad_to_extent, pad_to_multiple, LongitudinalSample, SlicePlane,
    VolumeError,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config field `{field}`: {message}")]
    Config {
        field: &'static str,
        message: String,
    },
    #[error("non-finite loss or gradient at step {step}; last finite state is step {saved_step}")]
    Diverged { step: usize, saved_step: usize },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Validate after every `val_every` epochs and after the last one.
    pub val_every: usize,
    pub slice_sampling: SliceSampling,
    pub planes: Vec<SlicePlane>,
    /// Probability threshold of validation masks.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::MultitaskLongitudinal,
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 10,
            steps_per_epoch: 100,
            seed: 0,
            val_every: 1,
            slice_sampling: SliceSampling::default(),
            planes: SlicePlane::ALL.to_vec(),
            threshold: crate::infer::DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, message: String| Err(TrainError::Config { field, message });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch", "must be at least 1".into());
        }
        if self.val_every == 0 {
            return bad("val_every", "must be at least 1".into());
        }
        if self.planes.is_empty() {
            return bad("planes", "select at least one slice plane".into());
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad(
                "threshold",
                format!("must lie in [0, 1), got {}", self.threshold),
            );
        }
        self.backbone
            .validate(self.variant)
            .map_err(|e| TrainError::Config {
                field: "backbone",
                message: e.to_string(),
            })?;
        self.loss.validate().map_err(|e| TrainError::Config {
            field: "loss",
            message: e.to_string(),
        })?;
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Config of the run that wrote a trainer checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let state: TrainerState = serde_json::from_value(ckpt.meta.extra.clone())
            .map_err(|e| TrainError::Resume(format!("checkpoint has no trainer state: {e}")))?;
        Ok(state.config)
    }
}

/// Loss components of one optimization step, evaluated before the update.
/// Registration terms are present only for the multitask variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the update.
    pub step: usize,
    /// 0-based epoch the step belongs to.
    pub epoch: usize,
    pub total: f64,
    pub seg: f64,
    pub sim: Option<f64>,
    pub smooth: Option<f64>,
    /// Seconds since the run (or resumed run) started.
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub epoch: usize,
    pub report: ValidationReport,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
}

pub const HISTORY_HEADER: &str = "step,epoch,L_total,L_seg,L_sim,L_smooth";

impl TrainHistory {
    /// Loss log; wall-clock times are left out so identical runs give
    /// identical files.
    pub fn steps_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.total,
                r.seg,
                opt(r.sim),
                opt(r.smooth)
            );
        }
        out
    }

    /// Mean validation metrics, one row per validation.
    pub fn validation_csv(&self) -> String {
        let mut out = String::from("step,epoch,dsc,ppv,ltpr,lfpr,vd,overall\n");
        for r in &self.validations {
            let v = r.report.summary.mean.as_array().map(|x| x.to_string());
            let _ = writeln!(out, "{},{},{}", r.step, r.epoch, v.join(","));
        }
        out
    }
}

/// Per-subject reports of one validation pass and their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub subjects: Vec<(String, MetricReport)>,
    pub summary: MetricSummary,
}

impl ValidationReport {
    pub fn overall(&self) -> f64 {
        self.summary.mean.overall
    }
}

/// 2.5D segmentation of every sample, scored against its reference mask and
/// averaged per subject. Samples must already be normalized the way the
/// predictor expects.
pub fn validate<P: SlicePredictor + ?Sized>(
    predictor: &P,
    samples: &[LongitudinalSample],
    threshold: f64,
) -> Result<ValidationReport> {
    let mut subjects = Vec::with_capacity(samples.len());
    for s in samples {
        let seg = segment_subject(predictor, s, threshold)?;
        subjects.push((
            s.subject_id.clone(),
            metrics::evaluate(&seg.mask, &s.gt_mask_ti),
        ));
    }
    let reports: Vec<MetricReport> = subjects.iter().map(|(_, r)| *r).collect();
    let summary = metrics::summarize(&reports).ok_or_else(|| TrainError::Config {
        field: "val",
        message: "validation split is empty".into(),
    })?;
    Ok(ValidationReport { subjects, summary })
}

/// Trainer bookkeeping stored in a checkpoint's `extra` field.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    optimizer_steps: u64,
    best: Option<BestModel>,
    history: TrainHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestModel {
    pub step: usize,
    pub overall: f64,
}

/// A training batch: inputs `(n, c, h, w)` and references `(n, 1, h, w)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Tensor,
    pub target: Tensor,
    pub slices: Vec<SliceRef>,
}

/// Extracts and pads the referenced slices to a common extent that is a
/// multiple of `multiple`.
pub fn assemble_batch(
    samples: &[LongitudinalSample],
    refs: &[SliceRef],
    variant: ModelVariant,
    multiple: usize,
    dtype: DType,
) -> Result<Batch> {
    let mut stacks = Vec::with_capacity(refs.len());
    for r in refs {
        let s = extract_slice(&samples[r.subject], r.plane, r.index, variant.layout())?;
        stacks.push(pad_to_multiple(&s, multiple));
    }
    let height = stacks.iter().map(|s| s.height()).max().unwrap_or(0);
    let width = stacks.iter().map(|s| s.width()).max().unwrap_or(0);
    let stacks: Vec<_> = stacks
        .iter()
        .map(|s| pad_to_extent(s, height, width))
        .collect();
    let mut target = Vec::with_capacity(refs.len() * height * width);
    for r in refs {
        let gt = samples[r.subject].gt_mask_ti.slice(r.plane, r.index)?;
        let padded: Array2<f32> = pad2d(gt, height, width);
        target.extend(padded.iter().copied());
    }
    Ok(Batch {
        input: stacks_to_tensor(&stacks, dtype)?,
        target: Tensor::from_vec(target, (refs.len(), 1, height, width), &Device::Cpu)?
            .to_dtype(dtype)?,
        slices: refs.to_vec(),
    })
}

const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last";
pub const BEST_CHECKPOINT: &str = "best";
/// Stream of the training generator; stream 0 of the same seed initializes
/// the weights.
const TRAIN_STREAM: u64 = 1;

pub struct Trainer {
    cfg: TrainConfig,
    train: Vec<LongitudinalSample>,
    val: Vec<LongitudinalSample>,
    sampler: SliceSampler,
    model: Model,
    params: Vec<Param>,
    optim: Amsgrad,
    rng: ChaCha8Rng,
    step: usize,
    best: Option<BestModel>,
    history: TrainHistory,
    started: Instant,
}

impl Trainer {
    /// Fresh run on raw (unnormalized) samples. An empty validation set
    /// disables validation and best-model tracking.
    pub fn new(
        cfg: TrainConfig,
        train: &[LongitudinalSample],
        val: &[LongitudinalSample],
    ) -> Result<Self> {
        cfg.validate()?;
        let normalize = |v: &[LongitudinalSample]| {
            v.iter()
                .map(|s| s.normalized())
                .collect::<Result<Vec<_>, _>>()
        };
        let train = normalize(train)?;
        let val = normalize(val)?;
        let sampler = SliceSampler::new(&train, &cfg.planes, cfg.slice_sampling)?;
        let model = Model::new(
            cfg.variant,
            &cfg.backbone,
            InitOptions {
                seed: cfg.seed,
                dtype: DType::F32,
            },
        )?;
        let params = model.params().trainable().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            optim: Amsgrad::new(AmsgradConfig::with_learning_rate(cfg.learning_rate)),
            cfg,
            train,
            val,
            sampler,
            model,
            params,
            rng,
            step: 0,
            best: None,
            history: TrainHistory::default(),
            started: Instant::now(),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    /// `cfg` may extend `epochs`; everything that shapes the trajectory must
    /// match the checkpointed config.
    pub fn resume(
        cfg: TrainConfig,
        train: &[LongitudinalSample],
        val: &[LongitudinalSample],
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let state: TrainerState = serde_json::from_value(ckpt.meta.extra.clone())
            .map_err(|e| TrainError::Resume(format!("checkpoint has no trainer state: {e}")))?;
        let comparable = |c: &TrainConfig| TrainConfig {
            epochs: 0,
            val_every: 0,
            ..c.clone()
        };
        if comparable(&state.config) != comparable(&cfg) {
            return Err(TrainError::Resume(
                "config differs from the checkpointed run in more than epochs/val_every".into(),
            ));
        }
        let mut t = Self::new(cfg, train, val)?;
        t.model.load_checkpoint(ckpt)?;
        t.optim = Amsgrad::import(
            AmsgradConfig::with_learning_rate(t.cfg.learning_rate),
            ckpt,
            state.optimizer_steps,
        )?;
        t.rng = ckpt
            .meta
            .rng
            .as_ref()
            .ok_or_else(|| TrainError::Resume("checkpoint has no RNG state".into()))?
            .restore()?;
        t.step = ckpt.meta.step;
        t.best = state.best;
        t.history = state.history;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn best(&self) -> Option<BestModel> {
        self.best
    }

    pub fn train_samples(&self) -> &[LongitudinalSample] {
        &self.train
    }

    pub fn val_samples(&self) -> &[LongitudinalSample] {
        &self.val
    }

    fn epoch_of(&self, step: usize) -> usize {
        step / self.cfg.steps_per_epoch
    }

    /// Full state after the steps taken so far.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_model(
            &self.model,
            self.epoch_of(self.step),
            self.step,
            Some(&self.rng),
        );
        self.optim.export(&mut ckpt);
        ckpt.meta.extra = serde_json::to_value(TrainerState {
            config: self.cfg.clone(),
            optimizer_steps: self.optim.steps_taken(),
            best: self.best,
            history: self.history.clone(),
        })
        .map_err(|e| TrainError::Resume(e.to_string()))?;
        Ok(ckpt)
    }

    /// One optimization step. A non-finite loss or gradient aborts before the
    /// update, leaving the model at its last finite state.
    pub fn step(&mut self) -> Result<StepRecord> {
        let refs: Vec<SliceRef> = (0..self.cfg.batch_size)
            .map(|_| self.sampler.draw(&mut self.rng))
            .collect();
        let batch = assemble_batch(
            &self.train,
            &refs,
            self.cfg.variant,
            self.model.downsampling_factor(),
            self.model.dtype(),
        )?;
        // Batch-norm statistics move during the forward pass; keep a copy to
        // roll back to if the step diverges.
        let buffers: Vec<(Var, Tensor)> = self
            .model
            .params()
            .entries()
            .iter()
            .filter(|p| p.kind == ParamKind::Buffer)
            .map(|p| Ok((p.var.clone(), p.var.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        let rollback = |step| -> Result<StepRecord> {
            for (var, saved) in &buffers {
                var.set(saved)?;
            }
            Err(TrainError::Diverged {
                step,
                saved_step: step - 1,
            })
        };
        let out = self
            .model
            .forward(&batch.input, &mut Mode::Train(&mut self.rng))?;
        let (loss, seg, sim, smooth) = match &out.field {
            Some(field) => {
                let x_i = batch.input.narrow(1, 0, 2)?;
                let x_j = batch.input.narrow(1, 2, 2)?;
                let l = losses::multitask_loss(
                    &out.prob,
                    &batch.target,
                    &x_i,
                    &x_j,
                    field,
                    &self.cfg.loss,
                )?;
                let v = l.values()?;
                (l.total, v.seg, Some(v.sim), Some(v.smooth))
            }
            None => {
                let l = losses::seg_loss(&out.prob, &batch.target, &self.cfg.loss)?;
                let v = losses::value(&l)?;
                (l, v, None, None)
            }
        };
        let total = losses::value(&loss)?;
        let step = self.step + 1;
        if !total.is_finite() {
            return rollback(step);
        }
        let grads = loss.backward()?;
        for p in &self.params {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                let norm = g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?;
                if !norm.is_finite() {
                    return rollback(step);
                }
            }
        }
        self.optim.step(&self.params, &grads)?;
        self.step = step;
        let record = StepRecord {
            step,
            epoch: self.epoch_of(step - 1),
            total,
            seg,
            sim,
            smooth,
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
        };
        self.history.steps.push(record);
        Ok(record)
    }

    /// Validation pass on the held-out samples with the current weights.
    pub fn validate(&self) -> Result<ValidationReport> {
        validate(&self.model, &self.val, self.cfg.threshold)
    }

    /// Runs until `epochs * steps_per_epoch` steps are done. With an output
    /// directory, writes `checkpoints/{last,best}`, `history.csv`,
    /// `validation.csv` and `timing.csv`; on divergence the last finite state
    /// is saved as `checkpoints/last` before the error is returned.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainHistory> {
        let total = self.cfg.total_steps();
        let mut timing = String::from("epoch,steps,train_seconds,val_seconds\n");
        let mut epoch_start = Instant::now();
        let mut epoch_steps = 0;
        while self.step < total {
            match self.step() {
                Ok(_) => epoch_steps += 1,
                Err(e @ TrainError::Diverged { .. }) => {
                    if let Some(dir) = out {
                        self.save(dir, LAST_CHECKPOINT)?;
                        self.write_logs(dir, &timing)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if !self.step.is_multiple_of(self.cfg.steps_per_epoch) && self.step != total {
                continue;
            }
            let epoch = self.epoch_of(self.step - 1);
            let train_seconds = epoch_start.elapsed().as_secs_f64();
            let val_start = Instant::now();
            let due = (epoch + 1).is_multiple_of(self.cfg.val_every) || self.step == total;
            if due && !self.val.is_empty() {
                let report = self.validate()?;
                log::info!(
                    "step {} epoch {epoch}: validation overall {:.4}",
                    self.step,
                    report.overall()
                );
                let improved = self.best.is_none_or(|b| report.overall() > b.overall);
                self.history.validations.push(ValidationRecord {
                    step: self.step,
                    epoch,
                    elapsed_seconds: self.started.elapsed().as_secs_f64(),
                    report: report.clone(),
                });
                if improved {
                    self.best = Some(BestModel {
                        step: self.step,
                        overall: report.overall(),
                    });
                    if let Some(dir) = out {
                        self.save(dir, BEST_CHECKPOINT)?;
                    }
                }
            }
            let _ = writeln!(
                timing,
                "{epoch},{epoch_steps},{train_seconds},{}",
                val_start.elapsed().as_secs_f64()
            );
            if let Some(dir) = out {
                self.save(dir, LAST_CHECKPOINT)?;
                self.write_logs(dir, &timing)?;
            }
            epoch_start = Instant::now();
            epoch_steps = 0;
        }
        Ok(self.history.clone())
    }

    fn save(&self, dir: &Path, name: &str) -> Result<()> {
        Ok(self
            .checkpoint()?
            .save(&dir.join(CHECKPOINT_DIR).join(name))?)
    }

    fn write_logs(&self, dir: &Path, timing: &str) -> Result<()> {
        for (name, text) in [
            ("history.csv", self.history.steps_csv()),
            ("validation.csv", self.history.validation_csv()),
            ("timing.csv", timing.to_string()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best: Option<BestModel>,
    /// State after the final step.
    pub last: Checkpoint,
}

/// Trains on the dataset's train split, validating on its val split.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let split = |name| -> Result<Vec<LongitudinalSample>> {
        Ok(dataset.split_samples(name)?.into_iter().cloned().collect())
    };
    let (tr, va) = (split(SplitName::Train)?, split(SplitName::Val)?);
    if va.is_empty() {
        return Err(TrainError::Config {
            field: "dataset",
            message: "validation split is empty".into(),
        });
    }
    let mut trainer = Trainer::new(cfg.clone(), &tr, &va)?;
    let history = trainer.run(out)?;
    Ok(TrainOutcome {
        history,
        best: trainer.best(),
        last: trainer.checkpoint()?,
    })
}

/// Path of a named checkpoint inside a run directory.
pub fn checkpoint_path(run_dir: &Path, name: &str) -> std::path::PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(name)
}
