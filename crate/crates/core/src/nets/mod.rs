//! FC-DenseNet ("Tiramisu") encoder-decoder networks for slice segmentation.
//!
//! Four variants share one backbone definition:
//!
//! * [`ModelVariant::Static`]: T1 and FLAIR of a single time point.
//! * [`ModelVariant::LongitudinalEarlyFusion`]: both time points stacked on
//!   the channel axis.
//! * [`ModelVariant::MultitaskLongitudinal`]: one encoder feeding a
//!   segmentation decoder and a registration decoder of identical topology.
//!   The registration decoder predicts a displacement field in pixels.
//! * [`ModelVariant::SiameseLateFusion`]: the downsampling path is applied to
//!   each time point with shared weights and the two feature stacks are
//!   concatenated at the bottleneck. Skip connections come from the
//!   reference stream.
//!
//! A single model serves all three slice orientations.
//!
//! Evaluation-mode forward passes never touch parameters or running
//! statistics, so a model may be shared between reader threads. Training-mode
//! passes update batch-norm running statistics and need exclusive use.

mod checkpoint;
mod conv;
mod layers;
mod norm;

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, CHECKPOINT_FORMAT_VERSION};
pub use layers::{sigmoid, Conv2d, Param, ParamKind, ParamStore};

use crate::volumes::{Layout, SliceStack};
use crate::warp::DisplacementField2D;
use layers::{DenseBlock, TransitionDown, TransitionUp};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("{variant} expects {expected} input channels, got {got}")]
    ChannelMismatch {
        variant: ModelVariant,
        expected: usize,
        got: usize,
    },
    #[error("spatial size {height}x{width} is not a multiple of {multiple}; pad slices first")]
    Unpadded {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("invalid backbone configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Static,
    #[serde(alias = "longitudinal")]
    LongitudinalEarlyFusion,
    #[serde(alias = "multitask")]
    MultitaskLongitudinal,
    #[serde(alias = "siamese")]
    SiameseLateFusion,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Static,
        ModelVariant::LongitudinalEarlyFusion,
        ModelVariant::MultitaskLongitudinal,
        ModelVariant::SiameseLateFusion,
    ];

    pub fn layout(self) -> Layout {
        match self {
            ModelVariant::Static => Layout::Static,
            _ => Layout::Longitudinal,
        }
    }

    pub fn input_channels(self) -> usize {
        self.layout().n_channels()
    }

    pub fn has_field_head(self) -> bool {
        self == ModelVariant::MultitaskLongitudinal
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Static => "static",
            ModelVariant::LongitudinalEarlyFusion => "longitudinal_early_fusion",
            ModelVariant::MultitaskLongitudinal => "multitask_longitudinal",
            ModelVariant::SiameseLateFusion => "siamese_late_fusion",
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "static" => Ok(ModelVariant::Static),
            "longitudinal" | "longitudinal_early_fusion" | "early_fusion" => {
                Ok(ModelVariant::LongitudinalEarlyFusion)
            }
            "multitask" | "multitask_longitudinal" => Ok(ModelVariant::MultitaskLongitudinal),
            "siamese" | "siamese_late_fusion" | "late_fusion" => Ok(ModelVariant::SiameseLateFusion),
            other => Err(format!(
                "unknown model variant {other:?} (expected static, longitudinal, multitask or siamese)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Total input channels; derived from the variant when absent.
    pub in_channels: Option<usize>,
    pub first_conv_channels: usize,
    pub growth_rate: usize,
    pub layers_per_dense_block: usize,
    /// Number of transition-down (and transition-up) stages.
    pub n_pool: usize,
    pub dropout_rate: f64,
    pub bottleneck_layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: None,
            first_conv_channels: 48,
            growth_rate: 12,
            layers_per_dense_block: 4,
            n_pool: 5,
            dropout_rate: 0.2,
            bottleneck_layers: 4,
        }
    }
}

impl BackboneConfig {
    /// Spatial dimensions of every input must be a multiple of this.
    pub fn downsampling_factor(&self) -> usize {
        1 << self.n_pool
    }

    pub fn validate(&self, variant: ModelVariant) -> Result<()> {
        if let Some(c) = self.in_channels {
            if c != variant.input_channels() {
                return Err(NetError::ChannelMismatch {
                    variant,
                    expected: variant.input_channels(),
                    got: c,
                });
            }
        }
        if self.first_conv_channels == 0 || self.growth_rate == 0 {
            return Err(NetError::Config("channel counts must be positive".into()));
        }
        if self.layers_per_dense_block == 0 || self.bottleneck_layers == 0 {
            return Err(NetError::Config(
                "dense blocks need at least one layer".into(),
            ));
        }
        if self.n_pool > 10 {
            return Err(NetError::Config(format!(
                "n_pool {} is unreasonably deep",
                self.n_pool
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NetError::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Training mode draws dropout masks from the supplied generator and uses
/// batch statistics; evaluation mode is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Raw network outputs for a batch: `prob` is `(n, 1, h, w)`, `field` is
/// `(n, 2, h, w)` for the multitask variant.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub prob: Tensor,
    pub field: Option<Tensor>,
}

/// Per-slice output converted to arrays.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub prob: Array2<f32>,
    pub field: Option<DisplacementField2D>,
}

/// One stage of the layer graph, for structural inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug)]
struct Encoder {
    first_conv: Conv2d,
    blocks: Vec<DenseBlock>,
    transitions: Vec<TransitionDown>,
    bottleneck: DenseBlock,
    calls: AtomicUsize,
}

struct DownOutput {
    features: Tensor,
    skips: Vec<Tensor>,
}

impl Encoder {
    /// `bottleneck_inputs` is 2 when two streams are fused before the
    /// bottleneck.
    fn new(
        ps: &mut ParamStore,
        cfg: &BackboneConfig,
        in_channels: usize,
        bottleneck_inputs: usize,
    ) -> Result<(Self, Vec<usize>)> {
        let first_conv = Conv2d::new(
            ps,
            "encoder.first_conv",
            in_channels,
            cfg.first_conv_channels,
            3,
        )?;
        let mut cur = cfg.first_conv_channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut skip_channels = Vec::new();
        for i in 0..cfg.n_pool {
            let block = DenseBlock::new(
                ps,
                &format!("encoder.down{i}"),
                cur,
                cfg.growth_rate,
                cfg.layers_per_dense_block,
                cfg.dropout_rate,
                false,
            )?;
            cur = block.out_channels();
            skip_channels.push(cur);
            blocks.push(block);
            transitions.push(TransitionDown::new(
                ps,
                &format!("encoder.pool{i}"),
                cur,
                cfg.dropout_rate,
            )?);
        }
        let bottleneck = DenseBlock::new(
            ps,
            "encoder.bottleneck",
            cur * bottleneck_inputs,
            cfg.growth_rate,
            cfg.bottleneck_layers,
            cfg.dropout_rate,
            true,
        )?;
        Ok((
            Self {
                first_conv,
                blocks,
                transitions,
                bottleneck,
                calls: AtomicUsize::new(0),
            },
            skip_channels,
        ))
    }

    fn down(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<DownOutput> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h = self.first_conv.forward(x)?;
        let mut skips = Vec::with_capacity(self.blocks.len());
        for (block, td) in self.blocks.iter().zip(&self.transitions) {
            h = block.forward(&h, mode)?;
            skips.push(h.clone());
            h = td.forward(&h, mode)?;
        }
        Ok(DownOutput { features: h, skips })
    }

    fn stages(&self) -> Vec<Stage> {
        let mut out = vec![Stage {
            name: "first_conv".into(),
            in_channels: self.first_conv.in_channels,
            out_channels: self.first_conv.out_channels,
        }];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(Stage {
                name: format!("down_block{i}"),
                in_channels: b.in_channels,
                out_channels: b.out_channels(),
            });
            out.push(Stage {
                name: format!("transition_down{i}"),
                in_channels: b.out_channels(),
                out_channels: b.out_channels(),
            });
        }
        out.push(Stage {
            name: "bottleneck".into(),
            in_channels: self.bottleneck.in_channels,
            out_channels: self.bottleneck.out_channels(),
        });
        out
    }
}

/// Initial lesion probability of the segmentation head. Starting near the
/// lesion prevalence instead of 0.5 keeps the MSE objective out of the
/// saturated sigmoid regime where every output collapses to background.
pub const SEG_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
enum HeadInit {
    /// Zero weights and bias: an identity displacement field at start.
    Zero,
    /// Random weights, bias at the logit of the given probability.
    Prior(f64),
}

#[derive(Debug)]
struct Decoder {
    ups: Vec<TransitionUp>,
    blocks: Vec<DenseBlock>,
    head: Conv2d,
}

impl Decoder {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &BackboneConfig,
        skip_channels: &[usize],
        out_channels: usize,
        head: HeadInit,
    ) -> Result<Self> {
        let mut prev = cfg.growth_rate * cfg.bottleneck_layers;
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        let mut cur = prev;
        for (i, &skip) in skip_channels.iter().rev().enumerate() {
            let last = i + 1 == skip_channels.len();
            ups.push(TransitionUp::new(ps, &format!("{name}.up{i}"), prev)?);
            cur = prev + skip;
            let block = DenseBlock::new(
                ps,
                &format!("{name}.block{i}"),
                cur,
                cfg.growth_rate,
                cfg.layers_per_dense_block,
                cfg.dropout_rate,
                !last,
            )?;
            prev = block.out_channels();
            cur = block.out_channels();
            blocks.push(block);
        }
        let head_name = format!("{name}.head");
        let head = match head {
            HeadInit::Zero => Conv2d::zeros(ps, &head_name, cur, out_channels, 1)?,
            HeadInit::Prior(p) => {
                Conv2d::with_bias(ps, &head_name, cur, out_channels, 1, (p / (1.0 - p)).ln())?
            }
        };
        Ok(Self { ups, blocks, head })
    }

    fn forward(
        &self,
        bottleneck: &Tensor,
        skips: &[Tensor],
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        let mut h = bottleneck.clone();
        for ((up, block), skip) in self.ups.iter().zip(&self.blocks).zip(skips.iter().rev()) {
            h = up.forward(&h, skip)?;
            h = block.forward(&h, mode)?;
        }
        self.head.forward(&h)
    }

    fn stages(&self, name: &str) -> Vec<Stage> {
        let mut out = Vec::new();
        for (i, (up, b)) in self.ups.iter().zip(&self.blocks).enumerate() {
            out.push(Stage {
                name: format!("{name}.transition_up{i}"),
                in_channels: up.channels,
                out_channels: up.channels,
            });
            out.push(Stage {
                name: format!("{name}.up_block{i}"),
                in_channels: b.in_channels,
                out_channels: b.out_channels(),
            });
        }
        out.push(Stage {
            name: format!("{name}.head"),
            in_channels: self.head.in_channels,
            out_channels: self.head.out_channels,
        });
        out
    }
}

/// Weight initialization settings.
#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    pub seed: u64,
    pub dtype: DType,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: DType::F32,
        }
    }
}

#[derive(Debug)]
pub struct Model {
    variant: ModelVariant,
    cfg: BackboneConfig,
    params: ParamStore,
    encoder: Encoder,
    seg_decoder: Decoder,
    field_decoder: Option<Decoder>,
}

/// Builds a model with default initialization (seed 0, 32-bit weights).
pub fn build_model(variant: ModelVariant, cfg: &BackboneConfig) -> Result<Model> {
    Model::new(variant, cfg, InitOptions::default())
}

/// Exact number of trainable scalars.
pub fn count_parameters(model: &Model) -> usize {
    model.params.count_trainable()
}

impl Model {
    pub fn new(variant: ModelVariant, cfg: &BackboneConfig, init: InitOptions) -> Result<Self> {
        cfg.validate(variant)?;
        let mut ps = ParamStore::new(init.dtype, init.seed);
        let (stream_channels, streams) = match variant {
            ModelVariant::SiameseLateFusion => (2, 2),
            v => (v.input_channels(), 1),
        };
        let (encoder, skips) = Encoder::new(&mut ps, cfg, stream_channels, streams)?;
        let seg_decoder = Decoder::new(
            &mut ps,
            "seg_decoder",
            cfg,
            &skips,
            1,
            HeadInit::Prior(SEG_PRIOR),
        )?;
        let field_decoder = if variant.has_field_head() {
            Some(Decoder::new(
                &mut ps,
                "field_decoder",
                cfg,
                &skips,
                2,
                HeadInit::Zero,
            )?)
        } else {
            None
        };
        Ok(Self {
            variant,
            cfg: cfg.clone(),
            params: ps,
            encoder,
            seg_decoder,
            field_decoder,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn downsampling_factor(&self) -> usize {
        self.cfg.downsampling_factor()
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_trainable()
    }

    /// Number of downsampling-path evaluations since construction. The
    /// multitask variant performs one per forward pass, the siamese variant
    /// two (one per time point).
    pub fn encoder_calls(&self) -> usize {
        self.encoder.calls.load(Ordering::Relaxed)
    }

    /// Layer graph in evaluation order: encoder, then the segmentation
    /// decoder, then the field decoder if present.
    pub fn stages(&self) -> Vec<Stage> {
        let mut s = self.encoder.stages();
        s.extend(self.seg_decoder.stages("seg_decoder"));
        if let Some(d) = &self.field_decoder {
            s.extend(d.stages("field_decoder"));
        }
        s
    }

    /// Forward pass on a batch `(n, c, h, w)`.
    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<ModelOutput> {
        let (_, c, h, w) = x.dims4()?;
        let expected = self.variant.input_channels();
        if c != expected {
            return Err(NetError::ChannelMismatch {
                variant: self.variant,
                expected,
                got: c,
            });
        }
        let m = self.downsampling_factor();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(NetError::Unpadded {
                height: h,
                width: w,
                multiple: m,
            });
        }
        let x = x.to_dtype(self.dtype())?;
        let (features, skips) = if self.variant == ModelVariant::SiameseLateFusion {
            let reference = self.encoder.down(&x.narrow(1, 0, 2)?, mode)?;
            let other = self.encoder.down(&x.narrow(1, 2, 2)?, mode)?;
            (
                Tensor::cat(&[&reference.features, &other.features], 1)?,
                reference.skips,
            )
        } else {
            let d = self.encoder.down(&x, mode)?;
            (d.features, d.skips)
        };
        let bottleneck = self.encoder.bottleneck.forward(&features, mode)?;
        let logits = self.seg_decoder.forward(&bottleneck, &skips, mode)?;
        let prob = sigmoid(&logits)?;
        let field = match &self.field_decoder {
            Some(d) => Some(d.forward(&bottleneck, &skips, mode)?),
            None => None,
        };
        Ok(ModelOutput { prob, field })
    }

    /// Evaluation-mode prediction for equally sized slice stacks.
    pub fn predict(&self, stacks: &[SliceStack]) -> Result<Vec<Prediction>> {
        if stacks.is_empty() {
            return Ok(Vec::new());
        }
        let batch = stacks_to_tensor(stacks, self.dtype())?;
        let out = self.forward(&batch, &mut Mode::Eval)?;
        let (n, _, h, w) = out.prob.dims4()?;
        let prob = tensor_to_array4(&out.prob)?;
        let field = out.field.as_ref().map(tensor_to_array4).transpose()?;
        Ok((0..n)
            .map(|i| Prediction {
                prob: prob
                    .index_axis(ndarray::Axis(0), i)
                    .index_axis(ndarray::Axis(0), 0)
                    .to_owned(),
                field: field.as_ref().map(|f| DisplacementField2D {
                    data: f.index_axis(ndarray::Axis(0), i).to_owned(),
                }),
            })
            .inspect(|p| debug_assert_eq!(p.prob.dim(), (h, w)))
            .collect())
    }

    /// Copies weights from a checkpoint whose variant and backbone match.
    pub fn load_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.meta.variant != self.variant {
            return Err(NetError::Checkpoint(format!(
                "checkpoint is for {}, model is {}",
                ckpt.meta.variant, self.variant
            )));
        }
        if ckpt.meta.backbone != self.cfg {
            return Err(NetError::Checkpoint(format!(
                "backbone mismatch: checkpoint {:?}, model {:?}",
                ckpt.meta.backbone, self.cfg
            )));
        }
        self.params.load(&ckpt.prefixed(checkpoint::MODEL_PREFIX))
    }

    /// Builds a model from a checkpoint, with the dtype it was saved in.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let dtype = ckpt.meta.dtype()?;
        let model = Self::new(
            ckpt.meta.variant,
            &ckpt.meta.backbone,
            InitOptions { seed: 0, dtype },
        )?;
        model.load_checkpoint(ckpt)?;
        Ok(model)
    }
}

/// Stacks equally sized slice stacks into an `(n, c, h, w)` tensor.
pub fn stacks_to_tensor(stacks: &[SliceStack], dtype: DType) -> Result<Tensor> {
    let first = &stacks[0];
    let (c, h, w) = first.data.dim();
    let mut buf = Vec::with_capacity(stacks.len() * c * h * w);
    for s in stacks {
        if s.data.dim() != (c, h, w) {
            return Err(NetError::Config(format!(
                "batch mixes slice shapes {:?} and {:?}",
                (c, h, w),
                s.data.dim()
            )));
        }
        buf.extend(s.data.iter().copied());
    }
    Ok(Tensor::from_vec(buf, (stacks.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn array3_to_tensor(a: &Array3<f32>, dtype: DType) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    let v: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, (1, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_array4(t: &Tensor) -> Result<Array4<f32>> {
    let (n, c, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array4::from_shape_vec((n, c, h, w), v).expect("tensor length matches its shape"))
}

#[cfg(test)]
mod tests;
