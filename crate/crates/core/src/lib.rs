//! Spectrogram-domain music source separation with sliced multi-head attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, reverse-mode differentiation and Adam.
//! - [`signal`]: STFT/ISTFT, mixture-phase reconstruction and WAV I/O.
//! - [`model`]: the separation network and its checkpoint format.
//! - [`data`]: stem-dataset indexing, excerpting, augmentation and a synthetic fixture.
//! - [`train`]: the waveform-domain objective and the optimisation loop.
//! - [`eval`]: SDR metrics, the ideal-ratio-mask oracle and the slice-count sweep.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tensor};
