//! Stereo waveforms, STFT analysis/synthesis and mixture-phase reconstruction.

mod stft;
mod wav;

pub use stft::{
    istft, reconstruct_source, stft, ComplexSpectrogram, MaskedIstft, Stft, StftConfig,
};
pub use wav::{read_wav, read_wav_segment, wav_info, write_wav, MonoPolicy, WavFormat, WavInfo};

use crate::numerics::{Scalar, Tensor};
use crate::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// Two-channel PCM signal with nominal range `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T: Scalar = f32> {
    channels: [Vec<T>; 2],
    sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(left: Vec<T>, right: Vec<T>, sample_rate: u32) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::Signal(format!(
                "channel lengths differ: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        if left.iter().chain(&right).any(|v| !v.is_finite()) {
            return Err(Error::Signal("non-finite sample".into()));
        }
        Ok(Self { channels: [left, right], sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { channels: [vec![T::zero(); len], vec![T::zero(); len]], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn seconds(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.channels[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        &mut self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<T>; 2] {
        &self.channels
    }

    pub fn swap_channels(&mut self) {
        self.channels.swap(0, 1);
    }

    /// `[2 × samples]`
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut data = self.channels[0].clone();
        data.extend_from_slice(&self.channels[1]);
        Tensor::from_vec(&[2, self.len()], data).expect("two equal channels")
    }

    pub fn from_tensor(t: &Tensor<T>, sample_rate: u32) -> Result<Self> {
        match *t.shape() {
            [2, n] => Self::new(t.data()[..n].to_vec(), t.data()[n..].to_vec(), sample_rate),
            ref s => Err(Error::shape("waveform", format!("expected [2 × samples], got {s:?}"))),
        }
    }

    /// Samples `start..end` of both channels.
    pub fn segment(&self, start: usize, end: usize) -> Self {
        Self {
            channels: [self.channels[0][start..end].to_vec(), self.channels[1][start..end].to_vec()],
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, gain: T) -> Self {
        let scale = |c: &Vec<T>| c.iter().map(|v| *v * gain).collect();
        Self { channels: [scale(&self.channels[0]), scale(&self.channels[1])], sample_rate: self.sample_rate }
    }

    /// Element-wise sum; lengths and rates must agree.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() || self.sample_rate != other.sample_rate {
            return Err(Error::Signal(format!(
                "cannot add {} samples @ {} Hz to {} samples @ {} Hz",
                other.len(),
                other.sample_rate,
                self.len(),
                self.sample_rate
            )));
        }
        let sum = |a: &Vec<T>, b: &Vec<T>| a.iter().zip(b).map(|(x, y)| *x + *y).collect();
        Ok(Self {
            channels: [sum(&self.channels[0], &other.channels[0]), sum(&self.channels[1], &other.channels[1])],
            sample_rate: self.sample_rate,
        })
    }

    /// Sum of squares over both channels.
    pub fn energy(&self) -> f64 {
        self.channels.iter().flatten().map(|v| v.as_f64().powi(2)).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        let c = |ch: &Vec<T>| ch.iter().map(|v| U::lit(v.as_f64())).collect();
        Waveform { channels: [c(&self.channels[0]), c(&self.channels[1])], sample_rate: self.sample_rate }
    }
}
