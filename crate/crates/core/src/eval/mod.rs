//! Simplified SDR, per-track framewise medians, the ideal-ratio-mask oracle
//! and the slice-count sweep.
//!
//! SDR here is `10·log₁₀(‖s‖² / ‖s − ŝ‖²)` without the distortion-filter
//! projection of BSSEval, so values are not comparable to published tables.

mod report;

pub use report::{EvalReport, SweepReport, TrackScores};

use std::sync::Arc;

use log::{info, warn};

use crate::data::{StemTrack, TrackRef};
use crate::model::SamsNet;
use crate::numerics::{Scalar, Tensor};
use crate::signal::{reconstruct_source, Stft, StftConfig, Waveform};
use crate::{Error, Result};

/// Reported value for a perfect estimate.
pub const SDR_CAP_DB: f64 = 100.0;
/// Frames whose reference power is below this are skipped.
pub const SILENCE_DBFS: f64 = -60.0;
pub const IRM_EPS: f64 = 1e-8;

fn check_pair<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::InvalidArgument(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    Ok(())
}

fn sdr_range<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>, start: usize, end: usize) -> f64 {
    let (mut signal, mut error) = (0.0, 0.0);
    for ch in 0..2 {
        for (s, e) in reference.channel(ch)[start..end].iter().zip(&estimate.channel(ch)[start..end]) {
            let (s, e) = (s.as_f64(), e.as_f64());
            signal += s * s;
            error += (s - e) * (s - e);
        }
    }
    if error == 0.0 {
        return SDR_CAP_DB;
    }
    (10.0 * (signal / error).log10()).min(SDR_CAP_DB)
}

/// SDR over both channels jointly, capped at [`SDR_CAP_DB`].
pub fn sdr<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<f64> {
    check_pair(reference, estimate)?;
    if reference.energy() == 0.0 {
        return Err(Error::InvalidArgument("SDR of an all-zero reference is undefined".into()));
    }
    Ok(sdr_range(reference, estimate, 0, reference.len()))
}

/// Median of `values`; the mean of the middle pair for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// SDR of each non-silent `frame_seconds` frame (hop equal to the frame);
/// signals shorter than one frame form a single frame.
pub fn framewise_sdr<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>, frame_seconds: f64) -> Result<Vec<f64>> {
    check_pair(reference, estimate)?;
    let frame = ((frame_seconds * reference.sample_rate() as f64).round() as usize).clamp(1, reference.len().max(1));
    let gate = 10f64.powf(SILENCE_DBFS / 10.0);
    let mut out = Vec::new();
    for start in (0..reference.len()).step_by(frame) {
        let end = start + frame;
        if end > reference.len() {
            break;
        }
        let power: f64 = (0..2)
            .flat_map(|ch| reference.channel(ch)[start..end].iter())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            / (2 * frame) as f64;
        if power >= gate {
            out.push(sdr_range(reference, estimate, start, end));
        }
    }
    Ok(out)
}

/// Median over non-silent one-second frames.
pub fn framewise_median_sdr<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<f64> {
    median(&mut framewise_sdr(reference, estimate, 1.0)?)
        .ok_or_else(|| Error::InvalidArgument(format!("every frame of the reference is below {SILENCE_DBFS} dBFS")))
}

/// `Mᵢ = |Sᵢ| / (Σⱼ |Sⱼ| + ε)` for source magnitudes shaped like `mix`.
pub fn irm_oracle<T: Scalar>(mix: &Tensor<T>, sources: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    if let Some(s) = sources.iter().find(|s| s.shape() != mix.shape()) {
        return Err(Error::shape("irm_oracle", format!("source {:?} vs mixture {:?}", s.shape(), mix.shape())));
    }
    let eps = T::lit(IRM_EPS);
    let denom: Vec<T> =
        (0..mix.numel()).map(|i| sources.iter().map(|s| s.data()[i]).fold(T::zero(), |a, b| a + b) + eps).collect();
    sources
        .iter()
        .map(|s| {
            let data = s.data().iter().zip(&denom).map(|(v, d)| *v / *d).collect();
            Tensor::from_vec(mix.shape(), data)
        })
        .collect()
}

/// Produces one estimate per requested source for a track.
pub trait Separator {
    fn name(&self) -> String;

    fn separate(&self, track: &StemTrack, sources: &[String]) -> Result<Vec<Waveform>>;
}

/// Per-source networks applied with a fixed test-time slice count.
pub struct ModelSeparator {
    models: Vec<(String, SamsNet<f32>)>,
    slices: usize,
    stft: Arc<Stft<f32>>,
}

impl ModelSeparator {
    pub fn new(models: Vec<(String, SamsNet<f32>)>, slices: usize, stft: StftConfig) -> Result<Self> {
        if slices == 0 {
            return Err(Error::InvalidArgument("slices must be at least 1".into()));
        }
        Ok(Self { models, slices, stft: Arc::new(Stft::new(stft)?) })
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn with_slices(&self, slices: usize) -> Result<Self> {
        Self::new(self.models.clone(), slices, self.stft.config())
    }

    fn model(&self, source: &str) -> Result<&SamsNet<f32>> {
        self.models
            .iter()
            .find(|(s, _)| s == source)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidArgument(format!("no model for source `{source}`")))
    }

    /// Frames the STFT yields for `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        self.stft.config().frames(len)
    }

    /// Estimates from a mixture alone, using `slices` (clamped to the frame
    /// count by the caller if desired).
    pub fn separate_mixture(&self, mixture: &Waveform, sources: &[String], slices: usize) -> Result<Vec<Waveform>> {
        let spec = self.stft.analyze(mixture)?;
        sources
            .iter()
            .map(|s| {
                let mask = self.model(s)?.infer(&spec.magnitude, slices)?;
                reconstruct_source(&spec, &mask, mixture.len())
            })
            .collect()
    }
}

impl Separator for ModelSeparator {
    fn name(&self) -> String {
        format!("samsnet (I={})", self.slices)
    }

    fn separate(&self, track: &StemTrack, sources: &[String]) -> Result<Vec<Waveform>> {
        self.separate_mixture(&track.mixture, sources, self.slices)
    }
}

/// Ideal ratio masks from the ground-truth stems, applied to the mixture.
pub struct IrmOracle {
    stft: Stft<f32>,
}

impl IrmOracle {
    pub fn new(stft: StftConfig) -> Result<Self> {
        Ok(Self { stft: Stft::new(stft)? })
    }
}

impl Separator for IrmOracle {
    fn name(&self) -> String {
        "IRM oracle".into()
    }

    fn separate(&self, track: &StemTrack, sources: &[String]) -> Result<Vec<Waveform>> {
        let mix = self.stft.analyze(&track.mixture)?;
        let all: Vec<_> = track.sources.iter().map(|(_, w)| self.stft.analyze(w)).collect::<Result<_>>()?;
        let mags: Vec<&Tensor<f32>> = all.iter().map(|s| &s.magnitude).collect();
        let masks = irm_oracle(&mix.magnitude, &mags)?;
        sources
            .iter()
            .map(|s| {
                let i = track.sources.iter().position(|(n, _)| n == s).ok_or_else(|| Error::Track {
                    track: track.name.clone(),
                    detail: format!("no stem `{s}`"),
                })?;
                reconstruct_source(&mix, &masks[i], track.len())
            })
            .collect()
    }
}

/// The mixture itself as every source's estimate.
pub struct MixtureBaseline;

impl Separator for MixtureBaseline {
    fn name(&self) -> String {
        "mixture".into()
    }

    fn separate(&self, track: &StemTrack, sources: &[String]) -> Result<Vec<Waveform>> {
        Ok(sources.iter().map(|_| track.mixture.clone()).collect())
    }
}

/// The ground-truth stems themselves.
pub struct Passthrough;

impl Separator for Passthrough {
    fn name(&self) -> String {
        "reference passthrough".into()
    }

    fn separate(&self, track: &StemTrack, sources: &[String]) -> Result<Vec<Waveform>> {
        sources
            .iter()
            .map(|s| {
                track.source(s).cloned().ok_or_else(|| Error::Track {
                    track: track.name.clone(),
                    detail: format!("no stem `{s}`"),
                })
            })
            .collect()
    }
}

/// Median SDR per source, `None` where the reference is silent throughout.
pub fn score_track(track: &StemTrack, estimates: &[Waveform], sources: &[String]) -> Result<Vec<Option<f64>>> {
    sources
        .iter()
        .zip(estimates)
        .map(|(s, est)| {
            let reference = track
                .source(s)
                .ok_or_else(|| Error::Track { track: track.name.clone(), detail: format!("no stem `{s}`") })?;
            let mut frames = framewise_sdr(reference, est, 1.0)?;
            let m = median(&mut frames);
            if m.is_none() {
                warn!("track `{}`: `{s}` is silent in every frame, excluded", track.name);
            }
            Ok(m)
        })
        .collect()
}

/// Scores `separator` on every track.
pub fn evaluate_testset(separator: &dyn Separator, tracks: &[TrackRef], sources: &[String]) -> Result<EvalReport> {
    evaluate_with(separator, tracks, sources, |_| None)
}

/// Like [`evaluate_testset`]; `skip` may name a reason to leave a track out.
fn evaluate_with(
    separator: &dyn Separator,
    tracks: &[TrackRef],
    sources: &[String],
    skip: impl Fn(&TrackRef) -> Option<String>,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(separator.name(), sources.to_vec());
    for t in tracks {
        if let Some(reason) = skip(t) {
            warn!("{}: skipping `{}`: {reason}", separator.name(), t.name);
            report.skipped.push((t.name.clone(), reason));
            continue;
        }
        let track = t.load()?;
        let estimates = separator.separate(&track, sources)?;
        let scores = score_track(&track, &estimates, sources)?;
        info!("{}: {} {:?}", separator.name(), t.name, scores);
        report.tracks.push(TrackScores { track: t.name.clone(), sdr: scores });
    }
    Ok(report)
}

/// One evaluation per slice count; tracks with fewer frames than `I` are
/// reported as skipped for that row.
pub fn slice_sweep(
    separator: &ModelSeparator,
    tracks: &[TrackRef],
    sources: &[String],
    slice_counts: &[usize],
) -> Result<SweepReport> {
    if slice_counts.is_empty() {
        return Err(Error::InvalidArgument("slice sweep needs at least one slice count".into()));
    }
    let mut rows = Vec::with_capacity(slice_counts.len());
    for &i in slice_counts {
        let sep = separator.with_slices(i)?;
        let report = evaluate_with(&sep, tracks, sources, |t| {
            let frames = sep.frames(t.frames);
            (i > frames).then(|| format!("{i} slices exceed its {frames} frames"))
        })?;
        rows.push((i, report));
    }
    Ok(SweepReport { rows })
}
