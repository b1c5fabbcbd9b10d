//! Command-line front end: `train`, `separate`, `evaluate`, `sweep` and
//! `verify`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

pub mod config;
pub mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samsnet::data::{scan_dataset, write_toy_dataset, DatasetSplit};
use samsnet::eval::{evaluate_testset, slice_sweep, IrmOracle, MixtureBaseline, ModelSeparator, Passthrough, Separator};
use samsnet::model::{load_checkpoint, SamsNet};
use samsnet::signal::{read_wav, write_wav, WavFormat};
use samsnet::train::train_source;

pub use config::{CliConfig, ConfigError, CONFIG_FILE};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// A problem with how the program was invoked rather than with the data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit code for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.is::<UsageError>() || err.is::<ConfigError>() {
        EXIT_USAGE
    } else {
        EXIT_FAILURE
    }
}

#[derive(Debug, Parser)]
#[command(name = "samsnet", version, about = "Sliced-attention music source separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accept mono WAV files by duplicating the channel.
    #[arg(long)]
    pub dup_mono: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root with one directory of stems per track and a `test` directory.
    #[arg(long, value_name = "DIR", conflicts_with = "toy")]
    pub data: Option<PathBuf>,
    /// Generate the synthetic two-source fixture in a temporary directory.
    #[arg(long)]
    pub toy: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SeparatorKind {
    Model,
    Irm,
    Mixture,
    Passthrough,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network per source.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Directory for checkpoints, logs and the effective configuration.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Optimiser steps per source (same as `--set max_steps=N`).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from `<source>.last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Split one stereo WAV into per-source WAVs.
    Separate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoints: PathBuf,
        #[arg(long, value_name = "WAV")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Test-time slice count; clamped to the number of frames.
        #[arg(long)]
        slices: Option<usize>,
        /// Write 16-bit PCM instead of 32-bit float.
        #[arg(long)]
        pcm16: bool,
    },
    /// Score a separator on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        checkpoints: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "model")]
        separator: SeparatorKind,
        #[arg(long)]
        slices: Option<usize>,
        /// Write `eval.csv` and `eval.txt` here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate the trained networks at several slice counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        checkpoints: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,12,16")]
        slices: Vec<usize>,
        /// Write `sweep.csv` and `sweep.txt` here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run the built-in verification battery.
    Verify {
        #[arg(long, hide = true)]
        perturb_backward: Option<String>,
        #[arg(long, hide = true, default_value_t = 1.5)]
        perturb_factor: f64,
    },
}

fn effective_config(common: &Common, toy: bool, checkpoints: Option<&Path>) -> anyhow::Result<CliConfig> {
    let mut cfg = if toy { CliConfig::toy() } else { CliConfig::default() };
    if let Some(saved) = checkpoints.map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file()) {
        cfg.apply_file(&saved)?;
    }
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if common.dup_mono {
        cfg.dup_mono = true;
    }
    Ok(cfg)
}

fn echo(cfg: &CliConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    info!("effective configuration:");
    for line in cfg.render().lines() {
        info!("  {line}");
    }
    Ok(())
}

/// Dataset root and, for the synthetic fixture, the directory guard keeping it alive.
fn dataset(cfg: &CliConfig, data: &DataArgs) -> anyhow::Result<(DatasetSplit, Option<tempfile::TempDir>)> {
    let (root, guard) = if data.toy {
        let dir = tempfile::tempdir().context("creating the fixture directory")?;
        write_toy_dataset(dir.path(), &cfg.toy)?;
        info!("synthetic fixture written to {}", dir.path().display());
        (dir.path().to_path_buf(), Some(dir))
    } else {
        let Some(root) = &data.data else {
            return Err(usage("a dataset is required: pass --data DIR or --toy"));
        };
        if !root.is_dir() {
            return Err(usage(format!("dataset path {} is not a directory", root.display())));
        }
        (root.clone(), None)
    };
    let split = scan_dataset(&root, &cfg.dataset_options(&root))?;
    Ok((split, guard))
}

fn load_models(dir: &Path, cfg: &CliConfig) -> anyhow::Result<Vec<(String, SamsNet<f32>)>> {
    cfg.sources
        .iter()
        .map(|s| {
            let path = dir.join(format!("{s}.ckpt"));
            let ck = load_checkpoint(&path).with_context(|| format!("checkpoint for `{s}`"))?;
            if ck.model.config().freq_bins != cfg.stft().bins() {
                bail!(
                    "{}: network expects {} bins, the STFT gives {}",
                    path.display(),
                    ck.model.config().freq_bins,
                    cfg.stft().bins()
                );
            }
            Ok((s.clone(), ck.model))
        })
        .collect()
}

fn emit(csv: &str, table: &str, out: Option<&Path>, stem: &str) -> anyhow::Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (ext, text) in [("csv", csv), ("txt", table)] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    print!("{table}");
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common, data, out, steps, lr, resume } => {
            let mut cfg = effective_config(&common, data.toy, None)?;
            if let Some(n) = steps {
                cfg.set("max_steps", &n.to_string())?;
            }
            if let Some(lr) = lr {
                cfg.set("lr", &lr.to_string())?;
            }
            echo(&cfg)?;
            train(&cfg, &data, &out, resume)
        }
        Command::Separate { common, checkpoints, input, out, slices, pcm16 } => {
            let cfg = effective_config(&common, false, Some(&checkpoints))?;
            echo(&cfg)?;
            separate(&cfg, &checkpoints, &input, &out, slices, pcm16)
        }
        Command::Evaluate { common, data, checkpoints, separator, slices, out } => {
            let mut cfg = effective_config(&common, data.toy, checkpoints.as_deref())?;
            if let Some(i) = slices {
                cfg.set("slices", &i.to_string())?;
            }
            echo(&cfg)?;
            let (split, _guard) = dataset(&cfg, &data)?;
            if split.test.is_empty() {
                bail!("the dataset has no test tracks");
            }
            let sep: Box<dyn Separator> = match separator {
                SeparatorKind::Model => {
                    let dir = checkpoints.ok_or_else(|| usage("--separator model needs --checkpoints DIR"))?;
                    Box::new(ModelSeparator::new(load_models(&dir, &cfg)?, cfg.model.slices, cfg.stft())?)
                }
                SeparatorKind::Irm => Box::new(IrmOracle::new(cfg.stft())?),
                SeparatorKind::Mixture => Box::new(MixtureBaseline),
                SeparatorKind::Passthrough => Box::new(Passthrough),
            };
            let report = evaluate_testset(sep.as_ref(), &split.test, &cfg.sources)?;
            emit(&report.to_csv(), &report.to_table(), out.as_deref(), "eval")
        }
        Command::Sweep { common, data, checkpoints, slices, out } => {
            let cfg = effective_config(&common, data.toy, Some(&checkpoints))?;
            echo(&cfg)?;
            if slices.contains(&0) {
                return Err(usage("slice counts must be at least 1"));
            }
            let (split, _guard) = dataset(&cfg, &data)?;
            if split.test.is_empty() {
                bail!("the dataset has no test tracks");
            }
            let sep = ModelSeparator::new(load_models(&checkpoints, &cfg)?, 1, cfg.stft())?;
            let report = slice_sweep(&sep, &split.test, &cfg.sources, &slices)?;
            emit(&report.to_csv(), &report.to_table(), out.as_deref(), "sweep")
        }
        Command::Verify { perturb_backward, perturb_factor } => {
            let fault = match perturb_backward {
                Some(op) => Some(
                    verify::Fault::named(&op, perturb_factor)
                        .ok_or_else(|| usage(format!("no backward rule named `{op}`")))?,
                ),
                None => None,
            };
            let checks = verify::battery(fault);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
            Ok(())
        }
    }
}

fn train(cfg: &CliConfig, data: &DataArgs, out: &Path, resume: bool) -> anyhow::Result<()> {
    let (split, _guard) = dataset(cfg, data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.render()).context("writing the effective configuration")?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.checkpoint_dir = Some(out.to_path_buf());
    let mut summary = String::from("source,probe_before,probe_after,best_validation,best_epoch,steps\n");
    for (i, source) in cfg.sources.iter().enumerate() {
        let last = out.join(format!("{source}.last.ckpt"));
        let (model, opt, epoch) = if resume && last.is_file() {
            let ck = load_checkpoint(&last)?;
            if ck.model.config() != &cfg.model {
                warn!("{source}: resuming with the checkpoint's network settings, which differ from the configuration");
            }
            info!("{source}: resuming after epoch {}", ck.epoch);
            (ck.model, ck.optimizer, ck.epoch)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            rng.set_stream(i as u64);
            (SamsNet::new(cfg.model.clone(), &mut rng)?, None, 0)
        };
        let report = train_source(model, source, &split, &train_cfg, opt, epoch)?;
        println!(
            "{source}: probe loss {:.4e} -> {:.4e}, best validation {:.4e} at epoch {}, {} steps",
            report.probe_before, report.probe_after, report.best_validation, report.best.epoch, report.steps
        );
        summary.push_str(&format!(
            "{source},{:.6e},{:.6e},{:.6e},{},{}\n",
            report.probe_before, report.probe_after, report.best_validation, report.best.epoch, report.steps
        ));
    }
    fs::write(out.join("train_summary.csv"), summary).context("writing the training summary")?;
    Ok(())
}

fn separate(
    cfg: &CliConfig,
    checkpoints: &Path,
    input: &Path,
    out: &Path,
    slices: Option<usize>,
    pcm16: bool,
) -> anyhow::Result<()> {
    if !input.is_file() {
        return Err(usage(format!("input {} is not a file", input.display())));
    }
    let mix = read_wav(input, cfg.mono_policy())?;
    let sep = ModelSeparator::new(load_models(checkpoints, cfg)?, 1, cfg.stft())?;
    let frames = sep.frames(mix.len());
    let mut i = slices.unwrap_or(cfg.model.slices);
    if i == 0 {
        return Err(usage("--slices must be at least 1"));
    }
    if i > frames {
        warn!("{i} slices exceed the input's {frames} frames; using {frames}");
        i = frames;
    }
    let estimates = sep.separate_mixture(&mix, &cfg.sources, i)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let format = if pcm16 { WavFormat::Pcm16 } else { WavFormat::Float32 };
    for (s, w) in cfg.sources.iter().zip(&estimates) {
        let path = out.join(format!("{s}.wav"));
        write_wav(&path, w, format)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}
