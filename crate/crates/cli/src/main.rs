//! Command-line interface for the recovery stack.
//!
//! Subcommands: `simulate`, `train-dac`, `train-cfc`, `recover`,
//! `evaluate`. Every failure exits with code 2 and a one-line
//! machine-parsable reason of the form `error: <slug>: <detail>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bitmend_core::cfc::{recover, Models};
use bitmend_core::error::Error;
use bitmend_core::pipeline::{
    apply_checkpoint, build_cfc, build_dac, evaluate, load_checkpoint, render_table,
    simulate_dataset, train_cfc, train_dac, write_reports, EvalMode, RecoveryKind, RunConfig,
};
use bitmend_core::videodata::{save_mask_sequence, save_video, Dataset};

#[derive(Parser)]
#[command(name = "bitmend", version, about = "Blind bitstream-corrupted video recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML). Defaults to the desk-scale profile.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::desk()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corrupted dataset.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        /// Run seed; the dataset is byte-identical for a fixed seed.
        #[arg(long)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the corruption detector.
    TrainDac {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        /// Dataset directory (from `simulate` or user-supplied).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a stage-1 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Stage 2: train the completion stack under a frozen detector.
    TrainCfc {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        /// Trained stage-1 checkpoint.
        #[arg(long)]
        dac_checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Recover one clip and write frames, masks, and a quality report.
    Recover {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Clip id under `<data>/clips/`; defaults to the first clip.
        #[arg(long)]
        clip: Option<String>,
        #[arg(long)]
        dac_checkpoint: PathBuf,
        #[arg(long)]
        cfc_checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// blind: detector masks; oracle: ground-truth masks.
        #[arg(long, default_value = "blind")]
        mode: String,
    },
    /// Evaluate recovery quality over a dataset.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dac_checkpoint: PathBuf,
        /// Required unless --recovery identity.
        #[arg(long)]
        cfc_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// blind | oracle | both
        #[arg(long, default_value = "blind")]
        mode: String,
        /// model | identity
        #[arg(long, default_value = "model")]
        recovery: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", slug(&e), e);
            ExitCode::from(2)
        }
    }
}

/// Stable machine-parsable failure slug.
fn slug(e: &Error) -> &'static str {
    match e {
        Error::MissingCheckpoint(_) => "missing-checkpoint",
        Error::FingerprintMismatch { .. } => "fingerprint-mismatch",
        Error::CheckpointFormat(_) => "checkpoint-format",
        Error::Config(_) => "bad-config",
        Error::MissingData(_) => "missing-data",
        Error::Parse(_) => "parse-error",
        Error::ShapeMismatch(_) => "shape-mismatch",
        Error::InvalidArgument(_) => "invalid-argument",
        Error::Diverged(_) => "diverged",
        Error::Io(_) => "io-error",
        Error::Png(_) => "png-error",
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let config = config.load()?;
            let dataset = simulate_dataset(&config, seed, &out)?;
            println!(
                "simulated {} clips x {} frames at {}x{} into {}",
                dataset.len(),
                config.data.frames_per_clip,
                config.model.input_h,
                config.model.input_w,
                out.display()
            );
            Ok(())
        }
        Command::TrainDac {
            config,
            seed,
            data,
            out,
            resume,
            steps,
        } => {
            let mut config = config.load()?;
            if let Some(s) = steps {
                config.train_dac.steps = s;
            }
            let dataset = Dataset::load(&data)?;
            let result = train_dac(&config, &dataset, seed, &out, resume.as_deref())?;
            println!(
                "trained dac for {} steps: loss {:.4} -> {:.4}, checkpoint {}",
                result.loss_curve.len(),
                result.loss_curve.first().unwrap_or(&f64::NAN),
                result.loss_curve.last().unwrap_or(&f64::NAN),
                result.checkpoint.display()
            );
            for (step, r) in &result.reports {
                println!(
                    "  step {step}: iou {:.3} dice {:.3} acc {:.3} recall {:.3}",
                    r.mean_iou, r.mean_dice, r.mean_acc, r.mean_recall
                );
            }
            Ok(())
        }
        Command::TrainCfc {
            config,
            seed,
            data,
            dac_checkpoint,
            out,
            resume,
            steps,
        } => {
            let mut config = config.load()?;
            if let Some(s) = steps {
                config.train_cfc.steps = s;
            }
            let dataset = Dataset::load(&data)?;
            let result = train_cfc(
                &config,
                &dataset,
                &dac_checkpoint,
                seed,
                &out,
                resume.as_deref(),
            )?;
            println!(
                "trained cfc for {} steps: loss {:.4} -> {:.4}, checkpoint {}",
                result.loss_curve.len(),
                result.loss_curve.first().unwrap_or(&f64::NAN),
                result.loss_curve.last().unwrap_or(&f64::NAN),
                result.checkpoint.display()
            );
            Ok(())
        }
        Command::Recover {
            config,
            data,
            clip,
            dac_checkpoint,
            cfc_checkpoint,
            out,
            mode,
        } => {
            let config = config.load()?;
            let dataset = Dataset::load(&data)?;
            let clip = match &clip {
                Some(id) => dataset
                    .clips
                    .iter()
                    .find(|c| &c.id == id)
                    .ok_or_else(|| Error::MissingData(format!("clip {id:?} not in dataset")))?,
                None => &dataset.clips[0],
            };
            let (dac_store, dac_model) = load_dac(&config, &dac_checkpoint)?;
            let (cfc_store, cfc_model) = load_cfc(&config, &cfc_checkpoint)?;
            let n_l = config.data.n_local.min(clip.frames.len());
            let idx: Vec<usize> = (0..n_l).collect();
            let locals = clip.frames.select_frames(&idx);
            let sideinfo: Vec<_> = idx.iter().map(|&i| clip.sideinfo[i].clone()).collect();
            let nl_count = config.data.n_nonlocal.min(clip.frames.len() - n_l);
            let nl_idx: Vec<usize> = (clip.frames.len() - nl_count..clip.frames.len()).collect();
            let nonlocals = clip.frames.select_frames(&nl_idx);
            let oracle = match mode.as_str() {
                "blind" => None,
                "oracle" => Some(clip.gt_masks.select_frames(&idx)),
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown mode {other:?} (blind|oracle)"
                    )))
                }
            };
            let models = Models {
                dac: &dac_model,
                dac_store: &dac_store,
                cfc: &cfc_model,
                cfc_store: &cfc_store,
            };
            let (recovered, masks) =
                recover(&locals, oracle.as_ref(), &sideinfo, &nonlocals, &models)?;
            save_video(&out.join("frames"), &recovered)?;
            save_mask_sequence(&out.join("masks"), &masks)?;
            // quality report against the stored clean frames
            let clean = clip.clean.select_frames(&idx);
            let quality = bitmend_core::metrics::sequence_quality(&recovered, &clean)?;
            let gt = clip.gt_masks.select_frames(&idx);
            let masked = bitmend_core::metrics::masked_region_metrics(&recovered, &clean, &gt)?;
            let report = report_line(&clip.id, &mode, &quality, &masked);
            std::fs::write(out.join("report.json"), &report)?;
            println!("{report}");
            Ok(())
        }
        Command::Evaluate {
            config,
            data,
            dac_checkpoint,
            cfc_checkpoint,
            out,
            mode,
            recovery,
        } => {
            let config = config.load()?;
            let dataset = Dataset::load(&data)?;
            let (dac_store, dac_model) = load_dac(&config, &dac_checkpoint)?;
            let mode = match mode.as_str() {
                "blind" => EvalMode::Blind,
                "oracle" => EvalMode::Oracle,
                "both" => EvalMode::Both,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown mode {other:?} (blind|oracle|both)"
                    )))
                }
            };
            let recovery = match recovery.as_str() {
                "model" => RecoveryKind::Model,
                "identity" => RecoveryKind::Identity,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown recovery {other:?} (model|identity)"
                    )))
                }
            };
            let cfc = match (&cfc_checkpoint, recovery) {
                (Some(path), _) => Some(load_cfc(&config, path)?),
                (None, RecoveryKind::Identity) => None,
                (None, RecoveryKind::Model) => {
                    return Err(Error::MissingCheckpoint(
                        "model recovery requires --cfc-checkpoint".into(),
                    ))
                }
            };
            let output = evaluate(
                &config,
                &dataset,
                (&dac_model, &dac_store),
                cfc.as_ref().map(|(s, m)| (m as _, s as _)),
                mode,
                recovery,
            )?;
            write_reports(&output, &out)?;
            print!("{}", render_table(&output));
            Ok(())
        }
    }
}

fn load_dac(
    config: &RunConfig,
    path: &std::path::Path,
) -> Result<(bitmend_core::nn::ParamStore, bitmend_core::dac::DacModel), Error> {
    let (mut store, model) = build_dac(config, 0);
    let ckpt = load_checkpoint(path)?;
    apply_checkpoint(&ckpt, &mut store, config.fingerprint(), "dac")?;
    Ok((store, model))
}

fn load_cfc(
    config: &RunConfig,
    path: &std::path::Path,
) -> Result<(bitmend_core::nn::ParamStore, bitmend_core::cfc::CfcModel), Error> {
    let (mut store, model) = build_cfc(config, 0);
    let ckpt = load_checkpoint(path)?;
    apply_checkpoint(&ckpt, &mut store, config.fingerprint(), "cfc")?;
    Ok((store, model))
}

fn report_line(
    clip: &str,
    mode: &str,
    quality: &bitmend_core::metrics::QualityReport,
    masked: &bitmend_core::metrics::QualityReport,
) -> String {
    format!(
        "{{\"clip\":{clip:?},\"mode\":{mode:?},\"psnr\":{:.4},\"ssim\":{},\"masked_psnr\":{:.4}}}",
        quality.psnr_db,
        quality
            .ssim
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "null".into()),
        masked.psnr_db,
    )
}
