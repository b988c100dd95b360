//! Model assembly, run configuration, training, checkpoints and evaluation.

pub mod checkpoint;
pub mod optim;
pub mod train;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{AlignedFeatures, Smgam};
use crate::data::{Normalization, Sample, SyntheticParams};
use crate::decoder::{Decoder, DecoderVariant, SegmentationLogits};
use crate::encoders::{EncoderConfig, TextEncoder, TokenBatch, VisionBackbone, LanguageFeatures};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::{Ctx, ParamBuilder, ParamStore};

pub use checkpoint::{Checkpoint, Manifest, TrainState};
pub use optim::{AdamW, PolySchedule};
pub use train::{
    ablate, ablation_table, evaluate, evaluate_samples, load_triplets, predict, predict_with, train, AblationRow,
    PreparedData, Prediction, TrainOptions, TrainOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Only `"adamw"` (decoupled weight decay) is supported.
    pub kind: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier on the learning rate of `encoders.*` parameters.
    pub backbone_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: "adamw".into(),
            lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            backbone_lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Only `"poly"` is supported.
    pub kind: String,
    pub power: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: "poly".into(),
            power: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        count: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        params: SyntheticParams,
    },
    /// An interchange directory (`annotations.json`, `images/`, `masks/`).
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Random horizontal flips of training triplets, swapping left/right words.
    pub augment_flip: bool,
    /// `None`: train-split statistics for synthetic data, ImageNet constants otherwise.
    pub normalization: Option<Normalization>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                count: 16,
                seed: 0,
                params: SyntheticParams::default(),
            },
            augment_flip: false,
            normalization: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub decoder_variant: DecoderVariant,
    pub use_smgam_lgvla: bool,
    pub use_smgam_vglva: bool,
    /// Start every alignment gate at zero output.
    pub zero_init_gates: bool,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub device: String,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            decoder_variant: DecoderVariant::Tcmd,
            use_smgam_lgvla: true,
            use_smgam_vglva: true,
            zero_init_gates: true,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            epochs: 40,
            batch_size: 2,
            seed: 0,
            device: "cpu".into(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// The fields that determine parameter shapes and preprocessing.
#[derive(Serialize)]
struct ModelSpec<'a> {
    encoder: &'a EncoderConfig,
    decoder_variant: DecoderVariant,
    use_smgam_lgvla: bool,
    use_smgam_vglva: bool,
}

impl RunConfig {
    /// Toy 64x64 run with the given vocabulary size.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig::toy(vocab_size),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        let o = &self.optimizer;
        if o.kind != "adamw" {
            return Err(Error::Config(format!("unsupported optimizer {:?}", o.kind)));
        }
        if !(o.lr > 0.0) || !o.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", o.lr)));
        }
        if o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("invalid AdamW hyperparameters".into()));
        }
        if !(o.backbone_lr_scale >= 0.0) {
            return Err(Error::Config("backbone_lr_scale must be non-negative".into()));
        }
        if self.schedule.kind != "poly" {
            return Err(Error::Config(format!("unsupported schedule {:?}", self.schedule.kind)));
        }
        if !(self.schedule.power >= 0.0) {
            return Err(Error::Config("schedule power must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.device()?;
        Ok(())
    }

    pub fn device(&self) -> Result<Device> {
        match self.device.as_str() {
            "cpu" => Ok(Device::Cpu),
            other => Err(Error::Config(format!(
                "device {other:?} is not available in this build (only \"cpu\")"
            ))),
        }
    }

    /// SHA-256 over the model and preprocessing fields.
    pub fn model_hash(&self) -> String {
        let spec = ModelSpec {
            encoder: &self.encoder,
            decoder_variant: self.decoder_variant,
            use_smgam_lgvla: self.use_smgam_lgvla,
            use_smgam_vglva: self.use_smgam_vglva,
        };
        let bytes = serde_json::to_vec(&spec).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

/// Forward products of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: SegmentationLogits,
    pub aligned: AlignedFeatures,
}

/// Text encoder, vision backbone, alignment module and decoder over one parameter store.
pub struct Model {
    pub store: ParamStore,
    pub text: TextEncoder,
    pub backbone: VisionBackbone,
    pub smgam: Smgam,
    pub decoder: Decoder,
    freeze_text: bool,
    image_size: usize,
}

impl Model {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        Self::build_with_dtype(cfg, DType::F32)
    }

    pub fn build_with_dtype(cfg: &RunConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let mut pb = ParamBuilder::new(dtype, cfg.seed);
        let text = TextEncoder::new(&mut pb.scope("encoders.text"), e)?;
        let backbone = VisionBackbone::new(&mut pb.scope("encoders.vision"), e)?;
        let smgam = Smgam::new(
            &mut pb.scope("smgam"),
            e.stage_channels,
            e.text_dim,
            e.num_heads,
            cfg.use_smgam_lgvla,
            cfg.use_smgam_vglva,
            cfg.zero_init_gates,
        )?;
        let decoder = Decoder::new(
            &mut pb.scope("tcmd"),
            cfg.decoder_variant,
            e.stage_channels,
            e.text_dim,
            e.num_heads,
            e.image_size,
        )?;
        let store = pb.finish();
        log::info!(
            "built model: decoder {}, lgvla {}, vglva {}, {} parameters",
            cfg.decoder_variant.name(),
            cfg.use_smgam_lgvla,
            cfg.use_smgam_vglva,
            store.num_parameters()
        );
        Ok(Self {
            store,
            text,
            backbone,
            smgam,
            decoder,
            freeze_text: e.freeze_text,
            image_size: e.image_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// `L_1` for a token batch.
    pub fn encode_text(&self, tokens: &TokenBatch, ctx: Ctx) -> Result<LanguageFeatures> {
        let text_ctx = Ctx {
            track: ctx.track && !self.freeze_text,
            ..ctx
        };
        Ok(LanguageFeatures {
            matrix: self.text.forward(&tokens.ids, &tokens.mask, text_ctx)?,
            mask: tokens.mask.clone(),
            stage_tag: 1,
        })
    }

    /// `images` `(B, 3, S, S)` normalized pixels.
    pub fn forward(&self, images: &Tensor, tokens: &TokenBatch, ctx: Ctx) -> Result<ModelOutput> {
        let l1 = self.encode_text(tokens, ctx)?;
        let aligned = self.smgam.run(&self.backbone, images, l1, ctx)?;
        let out = self.decoder.decode(&aligned.enhanced, aligned.final_language(), ctx)?;
        Ok(ModelOutput {
            logits: out.logits,
            aligned,
        })
    }
}

/// Model inputs and targets for a batch of samples.
pub struct Batch {
    pub images: Tensor,
    pub tokens: TokenBatch,
    /// `(B, S, S)` zeros and ones.
    pub targets: Tensor,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn new(samples: &[&Sample], dtype: DType, device: &Device) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        let s = first.size;
        if samples.iter().any(|x| x.size != s) {
            return Err(Error::Input("samples in a batch must share one size".into()));
        }
        let b = samples.len();
        let pixels: Vec<f32> = samples.iter().flat_map(|x| x.image.iter().copied()).collect();
        let masks: Vec<f32> = samples
            .iter()
            .flat_map(|x| x.mask.data().iter().map(|&v| v as f32))
            .collect();
        let exprs: Vec<_> = samples.iter().map(|x| x.tokens.clone()).collect();
        Ok(Self {
            images: Tensor::from_vec(pixels, (b, 3, s, s), device)?.to_dtype(dtype)?,
            tokens: TokenBatch::new(&exprs, dtype, device)?,
            targets: Tensor::from_vec(masks, (b, s, s), device)?.to_dtype(dtype)?,
            ids: samples.iter().map(|x| x.id.clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_roundtrip_and_partial_files() -> Result<()> {
        let cfg = RunConfig::toy(40);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg)?)?;
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"epochs": 3, "optimizer": {"lr": 0.001}}"#)?;
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.optimizer.weight_decay, 0.01);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
        Ok(())
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = RunConfig::toy(40);
        c.optimizer.lr = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::toy(40);
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy(40);
        c.device = "cuda".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy(40);
        c.encoder.stage_channels = [32, 64, 96, 192];
        assert!(Model::build(&c).is_err());
    }

    #[test]
    fn model_hash_ignores_training_knobs() {
        let a = RunConfig::toy(40);
        let mut b = a.clone();
        b.optimizer.lr = 1.0;
        b.epochs = 1;
        assert_eq!(a.model_hash(), b.model_hash());
        b.decoder_variant = DecoderVariant::Standard;
        assert_ne!(a.model_hash(), b.model_hash());
    }
}
