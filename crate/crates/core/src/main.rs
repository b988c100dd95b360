use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crossmodal_seg::data::refcoco::MaskEncoding;
use crossmodal_seg::data::{generate_synthetic, load_refcoco_dir, write_refcoco_dir, LoadOptions, Split};
use crossmodal_seg::decoder::DecoderVariant;
use crossmodal_seg::pipeline::{self, DataSource, RunConfig, TrainOptions};
use crossmodal_seg::{Error, Result};

#[derive(Parser)]
#[command(name = "crossmodal-seg", version, about = "Referring image segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes best/, last/ and train_log.jsonl to the output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of an interchange directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Refuse unless this config's model fields match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Segment the object an expression refers to.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expr: String,
        /// Mask output path.
        #[arg(long, default_value = "mask.png")]
        out: PathBuf,
        /// Also write `<out stem>_overlay.png`.
        #[arg(long)]
        overlay: bool,
    },
    /// Write a synthetic interchange dataset.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Store masks as run-length encodings instead of PNG files.
        #[arg(long)]
        rle: bool,
    },
    /// Train and test the four alignment/decoder combinations.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
}

/// A JSON run config; each flag overrides the key of the same name.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    decoder_variant: Option<DecoderVariant>,
    #[arg(long)]
    use_smgam_lgvla: Option<bool>,
    #[arg(long)]
    use_smgam_vglva: Option<bool>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Train on an interchange directory instead of the configured source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    device: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => RunConfig::toy(64),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.optimizer.weight_decay = v;
        }
        if let Some(v) = self.decoder_variant {
            cfg.decoder_variant = v;
        }
        if let Some(v) = self.use_smgam_lgvla {
            cfg.use_smgam_lgvla = v;
        }
        if let Some(v) = self.use_smgam_vglva {
            cfg.use_smgam_vglva = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.data {
            cfg.data.source = DataSource::Directory { path: v.clone() };
        }
        if let Some(v) = &self.device {
            cfg.device = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn overlay_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
    out.with_file_name(format!("{stem}_overlay.png"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, resume } => {
            let cfg = run.resolve()?;
            let triplets = pipeline::load_triplets(&cfg.data.source)?;
            let outcome = pipeline::train(
                &cfg,
                &triplets,
                &TrainOptions {
                    resume,
                    stop_after_epoch: None,
                },
            )?;
            println!(
                "trained {} epochs ({} steps); best val mIoU {:.4}; checkpoints in {}",
                outcome.state.epoch,
                outcome.state.step,
                outcome.state.best_val_miou,
                outcome.output_dir.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            config,
            report,
        } => {
            let expected: Option<RunConfig> = match config {
                Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
                None => None,
            };
            let loaded = load_refcoco_dir(&data, Some(split), &LoadOptions::default())?;
            let r = pipeline::evaluate(&checkpoint, &loaded.triplets, split, expected.as_ref())?;
            print!("{}", r.table());
            let json = serde_json::to_string_pretty(&r.to_json())?;
            if let Some(p) = report {
                fs::write(p, &json)?;
            } else {
                println!("{json}");
            }
        }
        Command::Predict {
            checkpoint,
            image,
            expr,
            out,
            overlay,
        } => {
            let img = image::open(&image)?.to_rgb8();
            let p = pipeline::predict(&checkpoint, &img, &expr, overlay)?;
            p.mask.save_png(&out)?;
            println!("mask written to {}", out.display());
            if let Some(o) = p.overlay {
                let path = overlay_path(&out);
                o.save(&path)?;
                println!("overlay written to {}", path.display());
            }
        }
        Command::MakeSynthetic { out, count, seed, rle } => {
            let triplets = generate_synthetic(seed, count, &Default::default())?;
            let enc = if rle { MaskEncoding::Rle } else { MaskEncoding::Png };
            write_refcoco_dir(&out, &triplets, enc)?;
            println!("{} triplets written to {}", triplets.len(), out.display());
        }
        Command::Ablate { run } => {
            let cfg = run.resolve()?;
            let triplets = pipeline::load_triplets(&cfg.data.source)?;
            let rows = pipeline::ablate(&cfg, &triplets)?;
            let table = pipeline::ablation_table(&rows);
            print!("{table}");
            fs::create_dir_all(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join("ablation.txt"), &table)?;
            fs::write(
                cfg.output_dir.join("ablation.json"),
                serde_json::to_string_pretty(&rows)?,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Load(issues)) => {
            for i in &issues {
                eprintln!("error: {i}");
            }
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
