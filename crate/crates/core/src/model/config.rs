use crate::{Error, Result};

/// Non-negative output nonlinearity applied to the mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskActivation {
    #[default]
    Relu,
    Sigmoid,
}

/// Divisor of the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionScale {
    /// `1/√C`, C the feature-map channel count.
    #[default]
    Channels,
    /// `1/√F`, F the frequency extent (the dot-product length).
    Bins,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Attention blocks `N`.
    pub blocks: usize,
    /// Heads per block `H`; each head runs at the full channel width.
    pub heads: usize,
    /// Feature-map channels `C`.
    pub channels: usize,
    /// Test-time slice count `I`.
    pub slices: usize,
    /// Frequency bins `F`; layer-norm gains are per `(C, F)`.
    pub freq_bins: usize,
    pub input_kernel: usize,
    pub output_kernel: usize,
    pub recovery_kernel: usize,
    pub dw_kernel: usize,
    pub mask_activation: MaskActivation,
    pub attention: bool,
    pub attention_scale: AttentionScale,
    /// Standardise each input frame over (channel, frequency) with learnable
    /// per-bin gain and bias before the input transform.
    pub input_norm: bool,
    /// Normalise each sublayer's output before the residual add, in addition
    /// to its input.
    pub sublayer_output_norm: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            heads: 2,
            channels: 64,
            slices: 12,
            freq_bins: 2049,
            input_kernel: 3,
            output_kernel: 3,
            recovery_kernel: 3,
            dw_kernel: 3,
            mask_activation: MaskActivation::Relu,
            attention: true,
            attention_scale: AttentionScale::Channels,
            input_norm: true,
            sublayer_output_norm: true,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heads", self.heads),
            ("channels", self.channels),
            ("slices", self.slices),
            ("freq_bins", self.freq_bins),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model {name} must be at least 1")));
        }
        let kernels = [
            ("input_kernel", self.input_kernel),
            ("output_kernel", self.output_kernel),
            ("recovery_kernel", self.recovery_kernel),
            ("dw_kernel", self.dw_kernel),
        ];
        if let Some((name, k)) = kernels.iter().find(|(_, k)| k % 2 == 0) {
            return Err(Error::InvalidArgument(format!("model {name} must be odd, got {k}")));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::InvalidArgument(format!("model ln_eps must be > 0, got {}", self.ln_eps)));
        }
        Ok(())
    }
}
