mod common;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use crossmodal_seg::data::{generate_synthetic, Split, SyntheticParams, Triplet};
use crossmodal_seg::decoder::DecoderVariant;
use crossmodal_seg::encoders::TokenBatch;
use crossmodal_seg::losses::combined_loss;
use crossmodal_seg::nn::Ctx;
use crossmodal_seg::pipeline::train::BEST_DIR;
use crossmodal_seg::pipeline::train::{ablation_configs, LAST_DIR, LOG_FILE};
use crossmodal_seg::pipeline::{
    evaluate, evaluate_samples, predict, train, AdamW, Batch, Checkpoint, Model, PolySchedule, PreparedData, RunConfig,
    TrainOptions,
};
use crossmodal_seg::Error;
use image::{Rgb, RgbImage};

const FIXTURE: &str = "tests/fixtures/loss_curve_seed0.json";

fn triplets() -> Vec<Triplet> {
    generate_synthetic(0, 16, &SyntheticParams::default()).unwrap()
}

fn toy(out: &Path) -> RunConfig {
    RunConfig {
        output_dir: out.to_path_buf(),
        ..RunConfig::toy(64)
    }
}

fn losses(steps: &[crossmodal_seg::pipeline::train::StepRecord]) -> Vec<f64> {
    steps.iter().map(|s| s.loss).collect()
}

#[test]
fn poly_schedule_matches_hand_computed_values() {
    let s = PolySchedule {
        base_lr: 5e-5,
        total_steps: 100,
        power: 0.9,
    };
    assert_eq!(s.lr_at(0), 5e-5);
    assert!((s.lr_at(50) - 2.679433656340733e-05).abs() < 1e-18);
    assert!((s.lr_at(99) - 7.924465962305567e-07).abs() < 1e-18);
    assert_eq!(s.lr_at(100), 0.0);
    let t = PolySchedule { total_steps: 30, ..s };
    assert!((t.lr_at(7) - 3.936551409577103e-05).abs() < 1e-18);
}

#[test]
fn default_config_carries_the_reference_hyperparameters() {
    let c = RunConfig::default();
    assert_eq!((c.optimizer.lr, c.optimizer.weight_decay, c.schedule.power), (5e-5, 0.01, 0.9));
    assert_eq!((c.epochs, c.batch_size, c.encoder.image_size), (40, 2, 480));
    assert!(c.validate().is_ok());
    let mut bad = RunConfig::toy(64);
    bad.optimizer.lr = 0.0;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = RunConfig::toy(64);
    bad.epochs = 0;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn toy_model_is_small_and_seeded() {
    let cfg = RunConfig::toy(64);
    let a = Model::build(&cfg).unwrap();
    let b = Model::build(&cfg).unwrap();
    assert!(a.store.num_parameters() < 5_000_000, "{}", a.store.num_parameters());
    assert_eq!(a.store.checksum().unwrap(), b.store.checksum().unwrap());
    let other = Model::build(&RunConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.store.checksum().unwrap(), other.store.checksum().unwrap());
}

fn one_step(cfg: &RunConfig, data: &PreparedData) -> f64 {
    let model = Model::build(cfg).unwrap();
    let before = model.store.checksum().unwrap();
    let samples: Vec<_> = data.train.iter().take(2).collect();
    let batch = Batch::new(&samples, model.dtype(), &Device::Cpu).unwrap();
    let out = model.forward(&batch.images, &batch.tokens, Ctx::TRAIN).unwrap();
    let loss = combined_loss(&out.logits.scores, &batch.targets, &cfg.loss).unwrap();
    let (total, _, _) = loss.values().unwrap();
    assert!(total.is_finite());
    let grads = loss.total.backward().unwrap();
    AdamW::new(&cfg.optimizer).step(&model.store, &grads, cfg.optimizer.lr).unwrap();
    let after = model.store.checksum().unwrap();
    assert!(after.is_finite() && after != before);
    total
}

#[test]
fn every_ablation_and_decoder_trains_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let base = toy(dir.path());
    let data = PreparedData::new(&base, &triplets()).unwrap();
    let mut counts = std::collections::BTreeMap::new();
    for (name, cfg) in ablation_configs(&base) {
        one_step(&cfg, &data);
        counts.insert(name, Model::build(&cfg).unwrap().store.num_parameters());
    }
    for variant in DecoderVariant::ALL {
        one_step(&RunConfig { decoder_variant: variant, ..base.clone() }, &data);
    }
    let full = counts["smgam+tcmd"];
    let singles = [counts["smgam+standard"], counts["no-smgam+tcmd"]];
    let baseline = counts["no-smgam+standard"];
    assert!(singles.iter().all(|&s| full > s && s > baseline), "{counts:?}");
    for (lgvla, vglva) in [(true, false), (false, true)] {
        let half = RunConfig {
            use_smgam_lgvla: lgvla,
            use_smgam_vglva: vglva,
            ..base.clone()
        };
        one_step(&half, &data);
        let n = Model::build(&half).unwrap().store.num_parameters();
        assert!(full > n && n > counts["no-smgam+tcmd"]);
    }
}

#[test]
fn baseline_ignores_the_expression() {
    let cfg = RunConfig {
        use_smgam_lgvla: false,
        use_smgam_vglva: false,
        decoder_variant: DecoderVariant::Standard,
        ..RunConfig::toy(64)
    };
    let data = PreparedData::new(&cfg, &triplets()).unwrap();
    let model = Model::build(&cfg).unwrap();
    let s = &data.train[0];
    let batch = Batch::new(&[s], model.dtype(), &Device::Cpu).unwrap();
    let other = TokenBatch::new(&[data.train[5].tokens.clone()], model.dtype(), &Device::Cpu).unwrap();
    let a = model.forward(&batch.images, &batch.tokens, Ctx::EVAL).unwrap().logits.scores;
    let b = model.forward(&batch.images, &other, Ctx::EVAL).unwrap().logits.scores;
    assert_ne!(s.tokens, data.train[5].tokens);
    assert_eq!(common::max_abs_diff(&a, &b), 0.0);
}

struct Run {
    _dir: tempfile::TempDir,
    out: PathBuf,
    outcome: crossmodal_seg::pipeline::TrainOutcome,
    cfg: RunConfig,
}

fn short_run(epochs: usize) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        epochs,
        ..toy(dir.path())
    };
    let outcome = train(&cfg, &triplets(), &TrainOptions::default()).unwrap();
    Run {
        out: dir.path().to_path_buf(),
        _dir: dir,
        outcome,
        cfg,
    }
}

#[test]
fn training_bookkeeping_and_artifacts() {
    let r = short_run(2);
    let o = &r.outcome;
    let per_epoch = o.data.train.len().div_ceil(r.cfg.batch_size);
    assert_eq!(o.steps.len(), 2 * per_epoch);
    let schedule = PolySchedule {
        base_lr: r.cfg.optimizer.lr,
        total_steps: 2 * per_epoch,
        power: r.cfg.schedule.power,
    };
    for s in &o.steps {
        assert_eq!(s.lr, schedule.lr_at(s.step));
    }
    assert_eq!(o.state.current_lr, 0.0);
    let best = o.epochs.iter().map(|e| e.val_miou).fold(0.0, f64::max);
    assert_eq!(o.state.best_val_miou, best);
    assert!(r.out.join(BEST_DIR).join("manifest.json").exists());
    let log = std::fs::read_to_string(r.out.join(LOG_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|l| l["kind"] == "epoch").count(), 2);
    let epoch = lines.iter().find(|l| l["kind"] == "epoch").unwrap();
    for key in ["epoch", "lr", "loss", "cross_entropy", "dice", "val_miou"] {
        assert!(!epoch["record"][key].is_null(), "{key}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let r = short_run(1);
    let o = &r.outcome;
    let last = r.out.join(LAST_DIR);
    let ck = Checkpoint::open(&last).unwrap();
    let loaded = ck.build_model().unwrap();
    for (name, var) in o.model.store.params().iter().chain(o.model.store.buffers()) {
        let other = loaded.store.params().get(name).or_else(|| loaded.store.buffers().get(name)).unwrap();
        assert_eq!(common::max_abs_diff(var.as_tensor(), other.as_tensor()), 0.0, "{name}");
    }
    let in_memory = evaluate_samples(&o.model, &o.data.val, 2).unwrap();
    let from_disk = evaluate(&last, &triplets(), Split::Val, Some(&r.cfg)).unwrap();
    assert_eq!(in_memory, from_disk);
    let again = evaluate(&last, &triplets(), Split::Val, None).unwrap();
    assert_eq!(
        serde_json::to_string(&from_disk.to_json()).unwrap(),
        serde_json::to_string(&again.to_json()).unwrap()
    );

    let mismatched = RunConfig {
        decoder_variant: DecoderVariant::Standard,
        ..r.cfg.clone()
    };
    match evaluate(&last, &triplets(), Split::Val, Some(&mismatched)) {
        Err(Error::Checkpoint { msg, .. }) => assert!(msg.contains("hash mismatch")),
        other => panic!("expected a refusal, got {other:?}"),
    }
    let manifest = std::fs::read_to_string(last.join("manifest.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    value["config"]["encoder"]["text_layers"] = serde_json::json!(2);
    std::fs::write(last.join("manifest.json"), value.to_string()).unwrap();
    assert!(matches!(Checkpoint::open(&last), Err(Error::Checkpoint { .. })));
}

#[test]
fn predict_returns_input_sized_deterministic_masks() {
    let r = short_run(1);
    let ck = r.out.join(BEST_DIR);
    let img = RgbImage::from_fn(100, 80, |x, y| Rgb([(x * 2) as u8, (y * 3) as u8, 90]));
    let a = predict(&ck, &img, "the red circle", true).unwrap();
    let b = predict(&ck, &img, "the red circle", false).unwrap();
    assert_eq!(a.mask.dims(), (100, 80));
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.overlay.unwrap().dimensions(), (100, 80));
    assert!(b.overlay.is_none());
    assert!(matches!(predict(&ck, &img, "   ", false), Err(Error::Input(_))));
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let a = short_run(2);
    let b = short_run(2);
    assert_eq!(losses(&a.outcome.steps), losses(&b.outcome.steps));
}

#[test]
fn resume_reproduces_uninterrupted_losses() {
    let full = short_run(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        epochs: 4,
        ..toy(dir.path())
    };
    let first = train(
        &cfg,
        &triplets(),
        &TrainOptions {
            resume: None,
            stop_after_epoch: Some(2),
        },
    )
    .unwrap();
    let resumed = train(
        &cfg,
        &triplets(),
        &TrainOptions {
            resume: Some(dir.path().join(LAST_DIR)),
            stop_after_epoch: None,
        },
    )
    .unwrap();
    let mut stitched = losses(&first.steps);
    stitched.extend(losses(&resumed.steps));
    let reference = losses(&full.outcome.steps);
    assert_eq!(stitched.len(), reference.len());
    for (i, (a, b)) in stitched.iter().zip(&reference).enumerate() {
        assert!((a - b).abs() < 1e-5, "step {i}: {a} vs {b}");
    }
    assert_eq!(resumed.state.step, full.outcome.state.step);
}

#[test]
fn first_five_epochs_track_recorded_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path());
    let outcome = train(
        &cfg,
        &triplets(),
        &TrainOptions {
            resume: None,
            stop_after_epoch: Some(5),
        },
    )
    .unwrap();
    let curve: Vec<f64> = outcome.epochs.iter().map(|e| e.loss).collect();
    assert_eq!(curve.len(), 5);
    for w in curve.windows(2) {
        assert!(w[1] < w[0], "{curve:?}");
    }
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(FIXTURE);
    if std::env::var_os("UPDATE_FIXTURES").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&serde_json::json!({ "epoch_loss": curve })).unwrap()).unwrap();
    }
    let recorded: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let recorded: Vec<f64> = serde_json::from_value(recorded["epoch_loss"].clone()).unwrap();
    for (a, b) in curve.iter().zip(&recorded) {
        assert!((a - b).abs() <= 1e-4 * b.abs(), "{curve:?} vs {recorded:?}");
    }
}

#[test]
fn f64_model_matches_f32_shapes() {
    let cfg = RunConfig::toy(64);
    let m = Model::build_with_dtype(&cfg, DType::F64).unwrap();
    assert_eq!(m.dtype(), DType::F64);
    assert_eq!(m.store.num_parameters(), Model::build(&cfg).unwrap().store.num_parameters());
}
