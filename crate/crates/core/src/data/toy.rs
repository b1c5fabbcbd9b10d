//! Synthetic two-stem songs for desk-scale runs: a harmonic source confined
//! below 1 kHz and band-limited noise between 2 and 3.6 kHz.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::num_complex::Complex;
use realfft::RealFftPlanner;

use super::{StemTrack, VALIDATION_LIST};
use crate::signal::Waveform;
use crate::{Error, Result};

pub const TOY_SOURCES: [&str; 2] = ["tonal", "noise"];

const NOTE_SECONDS: f64 = 0.5;
const TONAL_PEAK: f64 = 0.25;
const NOISE_BAND: (f64, f64) = (2000.0, 3600.0);
const NOISE_RMS: f64 = 0.08;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub train_tracks: usize,
    pub validation_tracks: usize,
    pub test_tracks: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { train_tracks: 5, validation_tracks: 1, test_tracks: 2, seconds: 30.0, sample_rate: 8000, seed: 0 }
    }
}

/// Half-second notes of four harmonics (fundamental 110–220 Hz), each with
/// a raised-sine envelope and a random stereo position.
fn tonal(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> [Vec<f32>; 2] {
    let note = (NOTE_SECONDS * sr) as usize;
    let mut out = [vec![0.0f32; len], vec![0.0f32; len]];
    for start in (0..len).step_by(note) {
        let f0 = rng.gen_range(110.0..220.0);
        let theta = rng.gen_range(PI / 8.0..3.0 * PI / 8.0);
        let (gl, gr) = (theta.cos() * 2f64.sqrt(), theta.sin() * 2f64.sqrt());
        let phases: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        for i in start..(start + note).min(len) {
            let t = (i - start) as f64 / sr;
            let env = (PI * (i - start) as f64 / note as f64).sin().powi(2);
            let v: f64 = (1..=4)
                .map(|h| (2.0 * PI * f0 * h as f64 * t + phases[h - 1]).sin() / h as f64)
                .sum::<f64>()
                * env
                * TONAL_PEAK
                / 2.1;
            out[0][i] = (v * gl) as f32;
            out[1][i] = (v * gr) as f32;
        }
    }
    out
}

/// Unit-magnitude random-phase spectrum on the noise band, inverted and
/// scaled to the target RMS.
fn band_noise(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut planner = RealFftPlanner::<f64>::new();
    let inverse = planner.plan_fft_inverse(len);
    let mut spec = inverse.make_input_vec();
    for (k, c) in spec.iter_mut().enumerate() {
        let f = k as f64 * sr / len as f64;
        if (NOISE_BAND.0..=NOISE_BAND.1).contains(&f) {
            let phi = rng.gen_range(0.0..2.0 * PI);
            *c = Complex::new(phi.cos(), phi.sin());
        }
    }
    let mut out = inverse.make_output_vec();
    inverse.process(&mut spec, &mut out).expect("buffers sized by the plan");
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(f64::MIN_POSITIVE);
    out.iter().map(|v| (v * NOISE_RMS / rms) as f32).collect()
}

pub fn toy_track(name: &str, seconds: f64, sample_rate: u32, seed: u64) -> Result<StemTrack> {
    let len = (seconds * sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::InvalidArgument("toy track must be longer than zero samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let [tl, tr] = tonal(len, sr, &mut rng);
    let (nl, nr) = (band_noise(len, sr, &mut rng), band_noise(len, sr, &mut rng));
    let tonal = Waveform::new(tl, tr, sample_rate)?;
    let noise = Waveform::new(nl, nr, sample_rate)?;
    let mixture = tonal.add(&noise)?;
    StemTrack::new(name, mixture, vec![(TOY_SOURCES[0].into(), tonal), (TOY_SOURCES[1].into(), noise)])
}

/// Writes `root/{train,test}/toyNN/` plus a validation list naming the last
/// `validation_tracks` training tracks.
pub fn write_toy_dataset(root: impl AsRef<Path>, cfg: &ToyConfig) -> Result<()> {
    let root = root.as_ref();
    let n_train = cfg.train_tracks + cfg.validation_tracks;
    let mut validation = Vec::new();
    for i in 0..n_train + cfg.test_tracks {
        let name = format!("toy{i:02}");
        let split = if i < n_train { "train" } else { "test" };
        let track = toy_track(&name, cfg.seconds, cfg.sample_rate, cfg.seed.wrapping_mul(1000).wrapping_add(i as u64))?;
        track.write(&root.join(split).join(&name))?;
        if i >= cfg.train_tracks && i < n_train {
            validation.push(name);
        }
    }
    let list = root.join(VALIDATION_LIST);
    let mut text = validation.join("\n");
    text.push('\n');
    fs::write(&list, text).map_err(|e| Error::io(&list, e))
}
