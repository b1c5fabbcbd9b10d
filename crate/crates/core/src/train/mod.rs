//! The waveform-domain objective and the optimisation loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{error, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugmentConfig, DatasetSplit, StemTrack, TrackRef};
use crate::model::{save_checkpoint, Checkpoint, SamsNet};
use crate::numerics::{AdamConfig, AdamState, Eager, Graph, Scalar, Tape, Tensor};
use crate::signal::{ComplexSpectrogram, MaskedIstft, Stft, StftConfig, Waveform};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossDomain {
    /// `‖s − ISTFT(M ⊙ |X| e^{j∠X})‖²`
    #[default]
    Time,
    /// `‖|S| − M ⊙ |X|‖²`
    Magnitude,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Excerpts whose gradients are summed into one optimiser step.
    pub batch: usize,
    pub excerpt_seconds: f64,
    pub max_epochs: usize,
    /// Stop after this many optimiser steps, if set.
    pub max_steps: Option<usize>,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub loss_domain: LossDomain,
    pub augment: AugmentConfig,
    pub stft: StftConfig,
    pub seed: u64,
    /// Where `<source>.ckpt` and `<source>.log` are written.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch: 1,
            excerpt_seconds: 6.0,
            max_epochs: 10_000,
            max_steps: None,
            patience: 140,
            loss_domain: LossDomain::Time,
            augment: AugmentConfig::default(),
            stft: StftConfig::default(),
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", self.adam.lr)));
        }
        if self.patience == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("patience and batch must be at least 1".into()));
        }
        if !(self.excerpt_seconds > 0.0) {
            return Err(Error::InvalidArgument(format!("excerpt length must be > 0 s, got {}", self.excerpt_seconds)));
        }
        Ok(())
    }
}

/// Objective for one source given its mask, recorded on `g`.
pub fn compute_loss<T: Scalar, G: Graph<T>>(
    g: &mut G,
    mask: &G::Value,
    mix: &ComplexSpectrogram<T>,
    target: &Waveform<T>,
    domain: LossDomain,
    stft: &Arc<Stft<T>>,
) -> Result<G::Value> {
    let diff = match domain {
        LossDomain::Time => {
            let op = MaskedIstft::new(stft.clone(), mix, target.len())?;
            let est = g.custom(&[mask], Arc::new(op))?;
            let s = g.constant(target.to_tensor());
            g.sub(&est, &s)?
        }
        LossDomain::Magnitude => {
            let s = stft.analyze(target)?;
            if s.magnitude.shape() != mix.magnitude.shape() {
                return Err(Error::shape(
                    "magnitude_loss",
                    format!("target {:?} vs mixture {:?}", s.magnitude.shape(), mix.magnitude.shape()),
                ));
            }
            let x = g.constant(mix.magnitude.clone());
            let est = g.mul(mask, &x)?;
            let s = g.constant(s.magnitude);
            g.sub(&est, &s)?
        }
    };
    g.sum_squares(&diff)
}

/// One training example: the mixture spectrogram and the target source.
pub struct Example {
    pub mix: ComplexSpectrogram<f32>,
    pub target: Waveform<f32>,
}

impl Example {
    pub fn new(track: &StemTrack, source: &str, stft: &Stft<f32>) -> Result<Self> {
        let target = track
            .source(source)
            .ok_or_else(|| Error::Track { track: track.name.clone(), detail: format!("no stem `{source}`") })?
            .clone();
        Ok(Self { mix: stft.analyze(&track.mixture)?, target })
    }
}

/// Eager loss of `model` on `ex` without recording gradients.
pub fn example_loss(model: &SamsNet<f32>, ex: &Example, domain: LossDomain, stft: &Arc<Stft<f32>>) -> Result<f64> {
    let mut g = Eager;
    let mask = model.infer(&ex.mix.magnitude, 1)?;
    Ok(compute_loss(&mut g, &mask, &ex.mix, &ex.target, domain, stft)?.item()?.as_f64())
}

/// Loss and parameter gradients of one example.
pub fn example_gradients(
    model: &SamsNet<f32>,
    ex: &Example,
    domain: LossDomain,
    stft: &Arc<Stft<f32>>,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(ex.mix.magnitude.clone());
    let mask = bound.forward_value(&mut tape, &x, 1)?;
    let loss = compute_loss(&mut tape, &mask, &ex.mix, &ex.target, domain, stft)?;
    let value = tape.value(loss)?.item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss", stage: "forward" });
    }
    tape.backward(loss)?;
    let grads = bound
        .values()
        .iter()
        .zip(model.params())
        .map(|(v, p)| Ok(tape.grad(*v)?.map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec)))
        .collect::<Result<_>>()?;
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub steps: usize,
    /// Mean loss per excerpt over the epoch.
    pub train_loss: f64,
    pub validation_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Lowest-validation-loss state seen, with optimiser state.
    pub best: Checkpoint,
    /// State after the final step; resuming from it continues the run exactly.
    pub last: Checkpoint,
    pub best_validation: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    /// Mean loss over one fixed, unaugmented excerpt per training track,
    /// before the first and after the last step.
    pub probe_before: f64,
    pub probe_after: f64,
}

/// Seeded, fixed excerpts (no augmentation).
fn fixed_examples(tracks: &[TrackRef], source: &str, cfg: &TrainConfig, stft: &Stft<f32>, salt: u64) -> Result<Vec<Example>> {
    tracks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
            rng.set_stream(i as u64);
            let seconds = cfg.excerpt_seconds.min(t.seconds());
            Example::new(&t.random_excerpt(seconds, &mut rng)?, source, stft)
        })
        .collect()
}

fn mean_loss(model: &SamsNet<f32>, examples: &[Example], cfg: &TrainConfig, stft: &Arc<Stft<f32>>) -> Result<f64> {
    let mut sum = 0.0;
    for ex in examples {
        sum += example_loss(model, ex, cfg.loss_domain, stft)?;
    }
    Ok(sum / examples.len().max(1) as f64)
}

fn append_log(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{} {:.6e} {:.6e} {:.3}", rec.epoch, rec.train_loss, rec.validation_loss, rec.seconds)
        .map_err(|e| Error::io(path, e))
}

/// Trains one per-source model. `resume` continues from a checkpoint's
/// parameters, optimiser state and epoch counter; each epoch draws from its
/// own seeded stream so a run resumed at an epoch boundary repeats the
/// uninterrupted one. Reaching `max_steps` mid-epoch ends the run after
/// validating that partial epoch.
pub fn train_source(
    model: SamsNet<f32>,
    source: &str,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    resume: Option<AdamState<f32>>,
    start_epoch: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training needs non-empty train and validation splits ({} / {} tracks)",
            split.train.len(),
            split.validation.len()
        )));
    }
    let stft = Arc::new(Stft::new(cfg.stft)?);
    let validation = fixed_examples(&split.validation, source, cfg, &stft, 0x5a11)?;
    let probe = fixed_examples(&split.train, source, cfg, &stft, 0x9b0e)?;
    let mut model = model;
    let mut opt = match resume {
        Some(o) => o,
        None => AdamState::new(cfg.adam, model.params()),
    };
    opt.config = cfg.adam;
    let log_path = cfg.checkpoint_dir.as_ref().map(|d| d.join(format!("{source}.log")));
    let ckpt_path = cfg.checkpoint_dir.as_ref().map(|d| d.join(format!("{source}.ckpt")));
    let last_path = cfg.checkpoint_dir.as_ref().map(|d| d.join(format!("{source}.last.ckpt")));
    if let Some(d) = &cfg.checkpoint_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let probe_before = mean_loss(&model, &probe, cfg, &stft)?;
    let mut best_validation = mean_loss(&model, &validation, cfg, &stft)?;
    let snapshot = |model: &SamsNet<f32>, opt: &AdamState<f32>, epoch| Checkpoint {
        label: source.to_string(),
        epoch,
        model: model.clone(),
        optimizer: Some(opt.clone()),
    };
    let mut best = snapshot(&model, &opt, start_epoch);
    info!("{source}: initial validation loss {best_validation:.4e}, probe loss {probe_before:.4e}");

    let mut epochs = Vec::new();
    let mut steps = 0;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut step_limit = false;
    for epoch in start_epoch + 1..=cfg.max_epochs as u64 {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                step_limit = true;
                break;
            }
            let mut acc: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
            for &i in batch {
                let track = &split.train[i];
                let seconds = cfg.excerpt_seconds.min(track.seconds());
                let excerpt = augment(&track.random_excerpt(seconds, &mut rng)?, &cfg.augment, &mut rng)?;
                let ex = Example::new(&excerpt, source, &stft)?;
                let (loss, grads) = example_gradients(&model, &ex, cfg.loss_domain, &stft).inspect_err(|e| {
                    error!("{source}: epoch {epoch} step {}: {e}", steps + 1);
                })?;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += *y;
                    }
                }
                total += loss;
                count += 1;
            }
            let grefs: Vec<&[f32]> = acc.iter().map(Vec::as_slice).collect();
            opt.step(model.params_mut(), &grefs)?;
            steps += 1;
        }
        if count == 0 {
            break;
        }
        let validation_loss = mean_loss(&model, &validation, cfg, &stft)?;
        let rec = EpochRecord {
            epoch,
            steps,
            train_loss: total / count as f64,
            validation_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "{source}: epoch {epoch} steps {steps} train {:.4e} validation {:.4e} ({:.1} s)",
            rec.train_loss, rec.validation_loss, rec.seconds
        );
        if let Some(p) = &log_path {
            append_log(p, &rec)?;
        }
        epochs.push(rec);
        if let Some(p) = &last_path {
            save_checkpoint(p, &snapshot(&model, &opt, epoch))?;
        }
        if validation_loss < best_validation {
            best_validation = validation_loss;
            best = snapshot(&model, &opt, epoch);
            stale = 0;
            if let Some(p) = &ckpt_path {
                save_checkpoint(p, &best)?;
            }
        } else {
            stale += 1;
            if stale >= cfg.patience {
                info!("{source}: no validation improvement for {stale} epochs, stopping");
                break;
            }
        }
        if step_limit || cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    if let Some(p) = &ckpt_path {
        if !p.exists() {
            save_checkpoint(p, &best)?;
        }
    }
    let probe_after = mean_loss(&model, &probe, cfg, &stft)?;
    let last_epoch = epochs.last().map_or(start_epoch, |r: &EpochRecord| r.epoch);
    let last = snapshot(&model, &opt, last_epoch);
    Ok(TrainReport { best, last, best_validation, epochs, steps, probe_before, probe_after })
}

/// Loss and its gradient with respect to `mask`.
pub fn mask_loss_gradient<T: Scalar>(
    mask: &Tensor<T>,
    mix: &ComplexSpectrogram<T>,
    target: &Waveform<T>,
    domain: LossDomain,
    stft: &Arc<Stft<T>>,
) -> Result<(T, Vec<T>)> {
    let mut tape = Tape::new();
    let m = tape.param(mask);
    let loss = compute_loss(&mut tape, &m, mix, target, domain, stft)?;
    let value = tape.value(loss)?.item()?;
    tape.backward(loss)?;
    Ok((value, tape.grad(m)?.expect("mask is a parameter").to_vec()))
}
