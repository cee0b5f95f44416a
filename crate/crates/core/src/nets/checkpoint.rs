//! Versioned on-disk checkpoints: a directory holding `checkpoint.json`
//! (metadata) and `tensors.safetensors` (model weights, batch-norm buffers
//! and optimizer moments).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, ModelVariant, NetError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub(crate) const MODEL_PREFIX: &str = "model.";
const META_FILE: &str = "checkpoint.json";
const TENSOR_FILE: &str = "tensors.safetensors";

/// Exact position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (exceeds 64 bits).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || NetError::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub variant: ModelVariant,
    pub backbone: BackboneConfig,
    pub dtype: String,
    pub epoch: usize,
    pub step: usize,
    pub rng: Option<RngState>,
    /// Free-form state owned by the trainer (optimizer step count, config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(NetError::Checkpoint(format!("unsupported dtype {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    /// Snapshot of a model's weights; further tensors (optimizer state) may
    /// be added under other prefixes.
    pub fn from_model(
        model: &super::Model,
        epoch: usize,
        step: usize,
        rng: Option<&ChaCha8Rng>,
    ) -> Self {
        let tensors = model
            .params()
            .tensors()
            .into_iter()
            .map(|(k, v)| (format!("{MODEL_PREFIX}{k}"), v))
            .collect();
        Self {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                variant: model.variant(),
                backbone: model.config().clone(),
                dtype: match model.dtype() {
                    DType::F64 => "f64".into(),
                    _ => "f32".into(),
                },
                epoch,
                step,
                rng: rng.map(RngState::capture),
                extra: serde_json::Value::Null,
            },
            tensors,
        }
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn prefixed(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| NetError::Checkpoint(e.to_string()))?;
        // Tensors first so a crash never leaves metadata pointing at a
        // missing tensor file.
        candle_core::safetensors::save(&self.tensors, dir.join(TENSOR_FILE))?;
        let tmp = dir.join(format!("{META_FILE}.tmp"));
        std::fs::write(&tmp, meta)?;
        std::fs::rename(tmp, dir.join(META_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(META_FILE))
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", dir.join(META_FILE).display())))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported checkpoint format version {} (expected {})",
                meta.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let tensors = candle_core::safetensors::load(dir.join(TENSOR_FILE), &Device::Cpu)?;
        Ok(Self { meta, tensors })
    }
}
