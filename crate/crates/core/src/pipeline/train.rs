//! Training loop, evaluation, prediction and the ablation sweep.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::preprocess::{flip_triplet, resize_normalize};
use crate::data::refcoco::MaskEncoding;
use crate::data::{
    generate_synthetic, load_refcoco_dir, preprocess, write_refcoco_dir, BinaryMask, LoadOptions, Normalization,
    Sample, Split, Triplet,
};
use crate::decoder::DecoderVariant;
use crate::encoders::{TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::losses::combined_loss;
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::nn::Ctx;

use super::checkpoint::{Checkpoint, TrainState};
use super::optim::{AdamW, PolySchedule};
use super::{Batch, DataSource, Model, RunConfig};

pub const CACHE_ENV: &str = "CROSSMODAL_SEG_CACHE";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

/// Triplets for the configured data source. Synthetic sets are cached as
/// interchange directories under `$CROSSMODAL_SEG_CACHE` when it is set.
pub fn load_triplets(source: &DataSource) -> Result<Vec<Triplet>> {
    match source {
        DataSource::Directory { path } => Ok(load_refcoco_dir(path, None, &LoadOptions::default())?.triplets),
        DataSource::Synthetic { count, seed, params } => {
            let Some(cache) = std::env::var_os(CACHE_ENV) else {
                return generate_synthetic(*seed, *count, params);
            };
            let key = format!("{:x}", Sha256::digest(serde_json::to_vec(params)?));
            let dir = PathBuf::from(cache).join(format!("synthetic-s{seed}-n{count}-{}", &key[..12]));
            if !dir.join(crate::data::refcoco::ANNOTATIONS_FILE).exists() {
                let triplets = generate_synthetic(*seed, *count, params)?;
                write_refcoco_dir(&dir, &triplets, MaskEncoding::Png)?;
                log::info!("cached synthetic dataset at {}", dir.display());
            }
            Ok(load_refcoco_dir(&dir, None, &LoadOptions { fail_fast: true })?.triplets)
        }
    }
}

fn seed_for_epoch(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Split-sorted samples plus the preprocessing they were built with.
pub struct PreparedData {
    pub vocab: Vocab,
    pub normalization: Normalization,
    pub train: Vec<Sample>,
    /// Mirrored counterparts of `train` when flip augmentation is on.
    pub train_flipped: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl PreparedData {
    pub fn new(cfg: &RunConfig, triplets: &[Triplet]) -> Result<Self> {
        let of = |s: Split| -> Vec<&Triplet> { triplets.iter().filter(|t| t.split == s).collect() };
        let train_t = of(Split::Train);
        if train_t.is_empty() {
            return Err(Error::Input("dataset has no train split".into()));
        }
        let flipped: Vec<Triplet> = if cfg.data.augment_flip {
            train_t.iter().map(|t| flip_triplet(t)).collect()
        } else {
            Vec::new()
        };
        let vocab = Vocab::build(
            train_t
                .iter()
                .map(|t| t.expression.as_str())
                .chain(flipped.iter().map(|t| t.expression.as_str())),
        );
        if vocab.len() > cfg.encoder.text_vocab_size {
            return Err(Error::Config(format!(
                "training vocabulary has {} entries, text_vocab_size is {}",
                vocab.len(),
                cfg.encoder.text_vocab_size
            )));
        }
        let normalization = match (&cfg.data.normalization, &cfg.data.source) {
            (Some(n), _) => *n,
            (None, DataSource::Synthetic { .. }) => {
                let owned: Vec<Triplet> = train_t.iter().map(|t| (*t).clone()).collect();
                Normalization::from_triplets(&owned)?
            }
            (None, DataSource::Directory { .. }) => Normalization::default(),
        };
        let prep = |ts: &[&Triplet]| -> Result<Vec<Sample>> {
            ts.iter()
                .map(|t| preprocess(t, cfg.encoder.image_size, &vocab, cfg.encoder.max_tokens, &normalization))
                .collect()
        };
        let train = prep(&train_t)?;
        let train_flipped = prep(&flipped.iter().collect::<Vec<_>>())?;
        let val = prep(&of(Split::Val))?;
        let test = prep(&of(Split::Test))?;
        log::info!(
            "samples: {} train, {} val, {} test; vocabulary {}",
            train.len(),
            val.len(),
            test.len(),
            vocab.len()
        );
        Ok(Self {
            vocab,
            normalization,
            train,
            train_flipped,
            val,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Run the model over `samples` in order and accumulate per-sample IoU at model resolution.
pub fn evaluate_samples(model: &Model, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::new();
    let device = model.store.device().clone();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::new(&refs, model.dtype(), &device)?;
        let out = model.forward(&batch.images, &batch.tokens, Ctx::EVAL)?;
        for (pred, s) in out.logits.binarize()?.iter().zip(chunk) {
            acc.add(pred, s.mask.data(), s.category.clone())?;
        }
    }
    acc.finalize()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Means over the epoch's steps.
    pub loss: f64,
    pub cross_entropy: f64,
    pub dice: f64,
    pub val_miou: f64,
    pub val_oiou: f64,
    pub val: serde_json::Value,
}

/// Controls for splitting a run across invocations.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint directory (its train state, weights and optimizer moments).
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (counted from zero), leaving a resumable `last` checkpoint.
    pub stop_after_epoch: Option<usize>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub data: PreparedData,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub state: TrainState,
    pub output_dir: PathBuf,
}

fn append_log(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Train on the train split, validating each epoch and writing `best/`,
/// `last/` and a JSON-lines log under `cfg.output_dir`.
pub fn train(cfg: &RunConfig, triplets: &[Triplet], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = PreparedData::new(cfg, triplets)?;
    if data.val.is_empty() {
        return Err(Error::Input("dataset has no val split".into()));
    }
    let (model, mut opt, mut state) = match &opts.resume {
        Some(dir) => {
            let ck = Checkpoint::open(dir)?;
            ck.check_compatible(cfg)?;
            if ck.vocab() != data.vocab || ck.manifest.normalization != data.normalization {
                return Err(Error::Checkpoint {
                    path: dir.clone(),
                    msg: "checkpoint vocabulary or normalization differs from this dataset".into(),
                });
            }
            let model = ck.build_model()?;
            let opt = ck.load_optimizer(&model)?;
            (model, opt, ck.manifest.train_state.clone())
        }
        None => (
            Model::build(cfg)?,
            AdamW::new(&cfg.optimizer),
            TrainState {
                step: 0,
                epoch: 0,
                current_lr: cfg.optimizer.lr,
                best_val_miou: 0.0,
                rng_state: seed_for_epoch(cfg.seed, 0),
            },
        ),
    };
    let out_dir = cfg.output_dir.clone();
    fs::create_dir_all(&out_dir)?;
    let log_path = out_dir.join(LOG_FILE);
    if opts.resume.is_none() && log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = PolySchedule {
        base_lr: cfg.optimizer.lr,
        total_steps: cfg.epochs * steps_per_epoch,
        power: cfg.schedule.power,
    };
    let device = cfg.device()?;
    let last_epoch = opts.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    while state.epoch < last_epoch {
        let epoch = state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(state.rng_state);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut comps = (Vec::new(), Vec::new(), Vec::new());
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.data.augment_flip && rng.random_bool(0.5) {
                        &data.train_flipped[i]
                    } else {
                        &data.train[i]
                    }
                })
                .collect();
            let batch = Batch::new(&samples, model.dtype(), &device)?;
            let lr = schedule.lr_at(state.step);
            let out = model.forward(&batch.images, &batch.tokens, Ctx::TRAIN)?;
            let loss = combined_loss(&out.logits.scores, &batch.targets, &cfg.loss)?;
            let (total, ce, dice) = loss.values()?;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    lr,
                    batch_ids: batch.ids,
                });
            }
            let grads = loss.total.backward()?;
            opt.step(&model.store, &grads, lr)?;
            let rec = StepRecord {
                step: state.step,
                epoch,
                lr,
                loss: total,
                cross_entropy: ce,
                dice,
            };
            append_log(&log_path, &serde_json::json!({"kind": "step", "record": rec}))?;
            steps.push(rec);
            comps.0.push(total);
            comps.1.push(ce);
            comps.2.push(dice);
            state.step += 1;
            state.current_lr = schedule.lr_at(state.step);
        }
        let report = evaluate_samples(&model, &data.val, cfg.batch_size)?;
        state.epoch += 1;
        state.rng_state = seed_for_epoch(cfg.seed, state.epoch);
        let improved = report.miou() > state.best_val_miou || !out_dir.join(BEST_DIR).exists();
        if improved {
            state.best_val_miou = state.best_val_miou.max(report.miou());
        }
        let rec = EpochRecord {
            epoch,
            step: state.step,
            lr: state.current_lr,
            loss: mean(&comps.0),
            cross_entropy: mean(&comps.1),
            dice: mean(&comps.2),
            val_miou: report.miou(),
            val_oiou: report.oiou(),
            val: report.to_json(),
        };
        log::info!(
            "epoch {} loss {:.5} (ce {:.5}, dice {:.5}) val mIoU {:.4}",
            epoch,
            rec.loss,
            rec.cross_entropy,
            rec.dice,
            rec.val_miou
        );
        append_log(&log_path, &serde_json::json!({"kind": "epoch", "record": rec}))?;
        epochs.push(rec);
        if improved {
            Checkpoint::save(
                &out_dir.join(BEST_DIR),
                &model,
                cfg,
                &state,
                &data.normalization,
                &data.vocab,
                None,
            )?;
        }
        Checkpoint::save(
            &out_dir.join(LAST_DIR),
            &model,
            cfg,
            &state,
            &data.normalization,
            &data.vocab,
            Some(&opt),
        )?;
    }
    Ok(TrainOutcome {
        model,
        data,
        steps,
        epochs,
        state,
        output_dir: out_dir,
    })
}

/// Evaluate a checkpoint on one split of `triplets`, preprocessed exactly as at training time.
pub fn evaluate(
    checkpoint: &Path,
    triplets: &[Triplet],
    split: Split,
    expected: Option<&RunConfig>,
) -> Result<EvalReport> {
    let ck = Checkpoint::open(checkpoint)?;
    if let Some(cfg) = expected {
        ck.check_compatible(cfg)?;
    }
    let model = ck.build_model()?;
    let vocab = ck.vocab();
    let cfg = &ck.manifest.config;
    let samples: Vec<Sample> = triplets
        .iter()
        .filter(|t| t.split == split)
        .map(|t| {
            preprocess(
                t,
                cfg.encoder.image_size,
                &vocab,
                cfg.encoder.max_tokens,
                &ck.manifest.normalization,
            )
        })
        .collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(Error::Input(format!("no {split} samples to evaluate")));
    }
    evaluate_samples(&model, &samples, cfg.batch_size)
}

pub struct Prediction {
    /// At the input image's resolution.
    pub mask: BinaryMask,
    pub overlay: Option<RgbImage>,
}

/// Red tint over the predicted foreground.
pub fn overlay(image: &RgbImage, mask: &BinaryMask) -> RgbImage {
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if mask.get(x, y) {
            let [r, g, b] = p.0;
            *p = Rgb([
                ((r as u16 + 255) / 2) as u8,
                (g as u16 / 2) as u8,
                (b as u16 / 2) as u8,
            ]);
        }
    }
    out
}

/// Mask an already loaded model predicts for `expression` on `image` (any size).
pub fn predict_with(
    model: &Model,
    vocab: &Vocab,
    norm: &Normalization,
    max_tokens: usize,
    image: &RgbImage,
    expression: &str,
) -> Result<BinaryMask> {
    if expression.trim().is_empty() {
        return Err(Error::Input("empty expression".into()));
    }
    let size = model.image_size();
    let pixels = resize_normalize(image, size, norm);
    let tokens = vocab.tokenize(expression, max_tokens)?;
    let device = model.store.device().clone();
    let images = candle_core::Tensor::from_vec(pixels, (1, 3, size, size), &device)?.to_dtype(model.dtype())?;
    let batch = TokenBatch::new(&[tokens], model.dtype(), &device)?;
    let out = model.forward(&images, &batch, Ctx::EVAL)?;
    let bits = out.logits.binarize()?.remove(0);
    let mask = BinaryMask::new(size as u32, size as u32, bits)?;
    Ok(mask.resize_nearest(image.width(), image.height()))
}

pub fn predict(checkpoint: &Path, image: &RgbImage, expression: &str, with_overlay: bool) -> Result<Prediction> {
    let ck = Checkpoint::open(checkpoint)?;
    let model = ck.build_model()?;
    let mask = predict_with(
        &model,
        &ck.vocab(),
        &ck.manifest.normalization,
        ck.manifest.config.encoder.max_tokens,
        image,
        expression,
    )?;
    let overlay = with_overlay.then(|| overlay(image, &mask));
    Ok(Prediction { mask, overlay })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub smgam: bool,
    pub decoder: DecoderVariant,
    pub parameters: usize,
    pub report: EvalReport,
}

/// The four alignment/decoder combinations: with and without both
/// alignment submodules, with the text-conditioned or the standard decoder.
pub fn ablation_configs(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    for smgam in [false, true] {
        for decoder in [DecoderVariant::Standard, DecoderVariant::Tcmd] {
            let name = format!(
                "{}+{}",
                if smgam { "smgam" } else { "no-smgam" },
                decoder.name()
            );
            let mut cfg = base.clone();
            cfg.use_smgam_lgvla = smgam;
            cfg.use_smgam_vglva = smgam;
            cfg.decoder_variant = decoder;
            cfg.output_dir = base.output_dir.join(&name);
            out.push((name, cfg));
        }
    }
    out
}

/// Train and test every ablation combination.
pub fn ablate(base: &RunConfig, triplets: &[Triplet]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        log::info!("ablation {name}");
        let outcome = train(&cfg, triplets, &TrainOptions::default())?;
        let split = if outcome.data.test.is_empty() { Split::Val } else { Split::Test };
        let report = evaluate_samples(&outcome.model, outcome.data.split(split), cfg.batch_size)?;
        rows.push(AblationRow {
            name,
            smgam: cfg.use_smgam_lgvla,
            decoder: cfg.decoder_variant,
            parameters: outcome.model.store.num_parameters(),
            report,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20}{:>12}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}{:>9}",
        "variant", "params", "Pr@0.5", "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9", "mIoU", "oIoU"
    );
    for r in rows {
        let s = &r.report.overall;
        let _ = write!(out, "{:<20}{:>12}", r.name, r.parameters);
        for &(_, p) in &s.pr_at {
            let _ = write!(out, "{:>9.2}", crate::metrics::round2(p));
        }
        let _ = writeln!(
            out,
            "{:>9.2}{:>9.2}",
            crate::metrics::round2(100.0 * s.miou),
            crate::metrics::round2(100.0 * s.oiou)
        );
    }
    out
}
