use rand::Rng;

use super::StemTrack;
use crate::signal::Waveform;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub gain_low: f64,
    pub gain_high: f64,
    /// Probability of swapping left and right, drawn per source.
    pub swap_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { gain_low: 0.25, gain_high: 1.25, swap_probability: 0.5 }
    }
}

impl AugmentConfig {
    /// Unit gains, no swapping.
    pub fn identity() -> Self {
        Self { gain_low: 1.0, gain_high: 1.0, swap_probability: 0.0 }
    }
}

/// Random gain and channel swap per source, then a fresh mixture summed from
/// the augmented sources.
pub fn augment<R: Rng + ?Sized>(track: &StemTrack, cfg: &AugmentConfig, rng: &mut R) -> Result<StemTrack> {
    let mut sources = Vec::with_capacity(track.sources.len());
    for (name, w) in &track.sources {
        let gain = if cfg.gain_high > cfg.gain_low { rng.gen_range(cfg.gain_low..cfg.gain_high) } else { cfg.gain_low };
        let mut s = w.scaled(gain as f32);
        if rng.gen_bool(cfg.swap_probability.clamp(0.0, 1.0)) {
            s.swap_channels();
        }
        sources.push((name.clone(), s));
    }
    let mut mixture = Waveform::silence(track.len(), track.sample_rate());
    for (_, s) in &sources {
        mixture = mixture.add(s)?;
    }
    StemTrack::new(track.name.clone(), mixture, sources)
}
