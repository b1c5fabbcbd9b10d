use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::Waveform;
use crate::numerics::{CustomOp, Eager, Graph, Scalar, Tensor};
use crate::{Error, Result};

/// Frame geometry. The window length equals the DFT size: 4096 samples is
/// 92.9 ms at 44.1 kHz, and hop 1024 gives 75 % overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window: 4096, hop: 1024, n_fft: 4096 }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Zeros placed before and after the signal so that every sample lies
    /// under the full overlap of windows.
    pub fn pad(&self) -> usize {
        self.window - self.hop
    }

    /// Frames needed to cover `len` samples plus padding, zero-filling the
    /// last partial frame.
    pub fn frames(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        if padded <= self.window {
            1
        } else {
            1 + (padded - self.window).div_ceil(self.hop)
        }
    }

    /// Longest signal `frames` frames can synthesise.
    pub fn max_len(&self, frames: usize) -> usize {
        ((frames.max(1) - 1) * self.hop + self.window).saturating_sub(2 * self.pad())
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.hop > self.window || self.n_fft != self.window || self.n_fft % 2 != 0 {
            return Err(Error::Signal(format!("unsupported frame parameters {self:?}")));
        }
        Ok(())
    }
}

/// One-sided complex spectrogram in polar form, `[2 × frames × bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram<T: Scalar = f32> {
    pub magnitude: Tensor<T>,
    pub phase: Tensor<T>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn frames(&self) -> usize {
        self.magnitude.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.magnitude.shape()[2]
    }

    /// Real and imaginary parts.
    pub fn to_cartesian(&self) -> (Vec<T>, Vec<T>) {
        self.magnitude
            .data()
            .iter()
            .zip(self.phase.data())
            .map(|(m, p)| (*m * p.cos(), *m * p.sin()))
            .unzip()
    }
}

/// Planned forward/inverse real FFTs plus the analysis window.
pub struct Stft<T: Scalar> {
    config: StftConfig,
    window: Vec<T>,
    forward: Arc<dyn RealToComplex<T>>,
    inverse: Arc<dyn ComplexToReal<T>>,
}

impl<T: Scalar> Stft<T> {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = RealFftPlanner::<T>::new();
        Ok(Self {
            config,
            window: hamming(config.window),
            forward: planner.plan_fft_forward(config.n_fft),
            inverse: planner.plan_fft_inverse(config.n_fft),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn analyze(&self, w: &Waveform<T>) -> Result<ComplexSpectrogram<T>> {
        let cfg = self.config;
        if w.is_empty() {
            return Err(Error::Signal("cannot analyse an empty signal".into()));
        }
        let pad = cfg.pad();
        let frames = cfg.frames(w.len());
        let bins = cfg.bins();
        let mut mag = Vec::with_capacity(2 * frames * bins);
        let mut phase = Vec::with_capacity(2 * frames * bins);
        let mut buf = self.forward.make_input_vec();
        let mut spec = self.forward.make_output_vec();
        let mut scratch = self.forward.make_scratch_vec();
        for ch in w.channels() {
            for t in 0..frames {
                let start = t * cfg.hop;
                for (n, b) in buf.iter_mut().enumerate() {
                    let x = (start + n).checked_sub(pad).and_then(|i| ch.get(i));
                    *b = x.map_or(T::zero(), |x| *x * self.window[n]);
                }
                self.forward
                    .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                    .map_err(|e| Error::Signal(e.to_string()))?;
                for c in &spec {
                    mag.push(c.norm());
                    phase.push(c.im.atan2(c.re));
                }
            }
        }
        Ok(ComplexSpectrogram {
            magnitude: Tensor::from_vec(&[2, frames, bins], mag)?,
            phase: Tensor::from_vec(&[2, frames, bins], phase)?,
            config: cfg,
            sample_rate: w.sample_rate(),
        })
    }

    /// `Σ_t w²[m + pad − t·hop]` for `m < len`.
    fn window_energy(&self, frames: usize, len: usize) -> Vec<T> {
        let mut d = vec![T::zero(); len];
        let pad = self.config.pad();
        for t in 0..frames {
            let start = t * self.config.hop;
            for (n, w) in self.window.iter().enumerate() {
                if let Some(slot) = (start + n).checked_sub(pad).and_then(|i| d.get_mut(i)) {
                    *slot = *slot + *w * *w;
                }
            }
        }
        d
    }

    fn check_len(&self, frames: usize, len: usize) -> Result<()> {
        if len > self.config.max_len(frames) {
            return Err(Error::Signal(format!(
                "{len} samples requested but {frames} frames cover only {}",
                self.config.max_len(frames)
            )));
        }
        Ok(())
    }

    /// Weighted overlap-add synthesis of `[2 × frames × bins]` Cartesian
    /// spectra, normalised by the summed squared window and truncated to `len`.
    fn synthesize(&self, re: &[T], im: &[T], frames: usize, len: usize) -> Result<[Vec<T>; 2]> {
        self.check_len(frames, len)?;
        let cfg = self.config;
        let bins = cfg.bins();
        let norm = T::one() / T::lit(cfg.n_fft as f64);
        let energy = self.window_energy(frames, len);
        let mut spec = self.inverse.make_input_vec();
        let mut buf = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        let mut out = [vec![T::zero(); len], vec![T::zero(); len]];
        for (ch, channel) in out.iter_mut().enumerate() {
            for t in 0..frames {
                let base = (ch * frames + t) * bins;
                for (k, c) in spec.iter_mut().enumerate() {
                    *c = Complex::new(re[base + k], im[base + k]);
                }
                spec[0].im = T::zero();
                spec[bins - 1].im = T::zero();
                self.inverse
                    .process_with_scratch(&mut spec, &mut buf, &mut scratch)
                    .map_err(|e| Error::Signal(e.to_string()))?;
                let start = t * cfg.hop;
                for (n, v) in buf.iter().enumerate() {
                    if let Some(slot) = (start + n).checked_sub(cfg.pad()).and_then(|i| channel.get_mut(i)) {
                        *slot = *slot + *v * norm * self.window[n];
                    }
                }
            }
            for (v, d) in channel.iter_mut().zip(&energy) {
                *v = *v / *d;
            }
        }
        Ok(out)
    }

    pub fn synthesize_spectrogram(&self, spec: &ComplexSpectrogram<T>, len: usize) -> Result<Waveform<T>> {
        let (re, im) = spec.to_cartesian();
        let [l, r] = self.synthesize(&re, &im, spec.frames(), len)?;
        Waveform::new(l, r, spec.sample_rate)
    }
}

/// Periodic Hamming window.
fn hamming<T: Scalar>(n: usize) -> Vec<T> {
    (0..n).map(|i| T::lit(0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())).collect()
}

/// Hamming-windowed STFT with the default 4096/1024 geometry.
pub fn stft<T: Scalar>(w: &Waveform<T>) -> Result<ComplexSpectrogram<T>> {
    Stft::new(StftConfig::default())?.analyze(w)
}

/// Inverse of [`stft`], truncated to `len` samples.
pub fn istft<T: Scalar>(spec: &ComplexSpectrogram<T>, len: usize) -> Result<Waveform<T>> {
    Stft::new(spec.config)?.synthesize_spectrogram(spec, len)
}

/// `ISTFT(|X| ⊙ M · e^{j∠X})` as a differentiable operation of the mask `M`.
///
/// The map is linear in `M`. Its adjoint takes the output gradient `g`,
/// divides by the overlap-add window energy, re-windows each frame, and
/// projects the frame's forward FFT `G_k` onto the mixture:
/// `∂L/∂M_k = c_k / N · Re(X_k · conj(G_k))` with `c_k = 1` at DC and
/// Nyquist and 2 elsewhere.
pub struct MaskedIstft<T: Scalar> {
    stft: Arc<Stft<T>>,
    mix_re: Vec<T>,
    mix_im: Vec<T>,
    shape: Vec<usize>,
    len: usize,
}

impl<T: Scalar> MaskedIstft<T> {
    pub fn new(stft: Arc<Stft<T>>, mix: &ComplexSpectrogram<T>, len: usize) -> Result<Self> {
        if mix.config != stft.config() {
            return Err(Error::Signal("spectrogram and synthesis frame parameters differ".into()));
        }
        stft.check_len(mix.frames(), len)?;
        let (mix_re, mix_im) = mix.to_cartesian();
        Ok(Self { stft, mix_re, mix_im, shape: mix.magnitude.shape().to_vec(), len })
    }
}

impl<T: Scalar> CustomOp<T> for MaskedIstft<T> {
    fn name(&self) -> &'static str {
        "masked_istft"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mask = inputs[0];
        if mask.shape() != self.shape.as_slice() {
            return Err(Error::shape(
                "masked_istft",
                format!("mask {:?} vs mixture {:?}", mask.shape(), self.shape),
            ));
        }
        let re: Vec<T> = mask.data().iter().zip(&self.mix_re).map(|(m, x)| *m * *x).collect();
        let im: Vec<T> = mask.data().iter().zip(&self.mix_im).map(|(m, x)| *m * *x).collect();
        let [mut l, r] = self.stft.synthesize(&re, &im, self.shape[1], self.len)?;
        l.extend_from_slice(&r);
        Tensor::from_vec(&[2, self.len], l)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let stft = &self.stft;
        let cfg = stft.config;
        let (frames, bins) = (self.shape[1], self.shape[2]);
        let energy = stft.window_energy(frames, self.len);
        let inv_n = T::one() / T::lit(cfg.n_fft as f64);
        let two = T::lit(2.0);
        let mut grad = vec![T::zero(); self.mix_re.len()];
        let mut buf = stft.forward.make_input_vec();
        let mut spec = stft.forward.make_output_vec();
        let mut scratch = stft.forward.make_scratch_vec();
        for ch in 0..2 {
            let g = &grad_out[ch * self.len..(ch + 1) * self.len];
            for t in 0..frames {
                let start = t * cfg.hop;
                for (n, b) in buf.iter_mut().enumerate() {
                    *b = match (start + n).checked_sub(cfg.pad()).filter(|i| *i < self.len) {
                        Some(i) => g[i] / energy[i] * stft.window[n],
                        None => T::zero(),
                    };
                }
                stft.forward
                    .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                    .map_err(|e| Error::Signal(e.to_string()))?;
                let base = (ch * frames + t) * bins;
                for (k, gk) in spec.iter().enumerate() {
                    let c = if k == 0 || k == bins - 1 { inv_n } else { two * inv_n };
                    // Re(X · conj(G)) = Xr·Gr + Xi·Gi
                    grad[base + k] = c * (self.mix_re[base + k] * gk.re + self.mix_im[base + k] * gk.im);
                }
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// Source estimate from a mixture spectrogram and a non-negative mask, using
/// the mixture phase.
pub fn reconstruct_source<T: Scalar>(
    mix: &ComplexSpectrogram<T>,
    mask: &Tensor<T>,
    len: usize,
) -> Result<Waveform<T>> {
    if mask.data().iter().any(|m| *m < T::zero()) {
        return Err(Error::InvalidArgument("mask has negative entries".into()));
    }
    let op = MaskedIstft::new(Arc::new(Stft::new(mix.config)?), mix, len)?;
    let mut g = Eager;
    let out = g.custom(&[mask], Arc::new(op))?;
    Waveform::from_tensor(&out, mix.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_covers_both_pads() {
        let c = StftConfig::default();
        assert_eq!(c.pad(), 3072);
        assert_eq!(c.frames(1), 4);
        assert_eq!(c.frames(4096), 7);
        assert_eq!(c.frames(4097), 8);
        assert_eq!(c.frames(4096 + 1024), 8);
        assert_eq!(c.max_len(7), 4096);
        assert_eq!(c.max_len(8), 5120);
        assert_eq!(c.bins(), 2049);
    }

    #[test]
    fn hamming_is_periodic() {
        let w: Vec<f64> = hamming(8);
        assert!((w[0] - 0.08).abs() < 1e-12);
        assert!((w[4] - 1.0).abs() < 1e-12);
        assert!((w[1] - w[7]).abs() < 1e-12);
    }

    #[test]
    fn empty_signal_is_rejected() {
        let w = Waveform::<f32>::silence(0, 44_100);
        assert!(matches!(stft(&w), Err(Error::Signal(_))));
    }

    #[test]
    fn requested_length_beyond_frames_is_rejected() {
        let w = Waveform::<f32>::silence(5000, 44_100);
        let s = stft(&w).unwrap();
        assert_eq!(s.frames(), 8);
        assert!(istft(&s, 5120).is_ok());
        assert!(istft(&s, 5121).is_err());
    }
}
