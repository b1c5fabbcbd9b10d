//! Flat `key = value` configuration with `#` comments.
//!
//! Every key has a default. Sources of settings are applied in order:
//! defaults, the `--toy` preset, a `samsnet.conf` next to the checkpoints,
//! `--config FILE`, then each `--set key=value`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use samsnet::data::{DatasetOptions, ToyConfig, MUSDB_SOURCES, TOY_SOURCES, VALIDATION_LIST};
use samsnet::model::{AttentionScale, MaskActivation, ModelConfig};
use samsnet::signal::{MonoPolicy, StftConfig};
use samsnet::train::{LossDomain, TrainConfig};

/// Name of the effective configuration written next to trained checkpoints.
pub const CONFIG_FILE: &str = "samsnet.conf";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("{path}:{line}: expected `key = value`, got `{text}`")]
    Syntax { path: PathBuf, line: usize, text: String },
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sources: Vec<String>,
    /// Relative to the dataset root unless absolute.
    pub validation_list: String,
    pub dup_mono: bool,
    pub toy: ToyConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sources: MUSDB_SOURCES.map(String::from).to_vec(),
            validation_list: VALIDATION_LIST.into(),
            dup_mono: false,
            toy: ToyConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "blocks",
    "heads",
    "channels",
    "slices",
    "input_kernel",
    "output_kernel",
    "recovery_kernel",
    "depthwise_kernel",
    "mask_activation",
    "attention",
    "attention_scale",
    "input_norm",
    "sublayer_output_norm",
    "ln_eps",
    "window",
    "hop",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch",
    "excerpt_seconds",
    "max_epochs",
    "max_steps",
    "patience",
    "loss_domain",
    "gain_low",
    "gain_high",
    "swap_probability",
    "seed",
    "sources",
    "validation_list",
    "dup_mono",
    "toy_seconds",
    "toy_seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T, ConfigError> {
    options.iter().find(|(n, _)| *n == value).map(|(_, v)| *v).ok_or_else(|| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: format!("expected one of {}", options.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")),
    })
}

const MASKS: &[(&str, MaskActivation)] = &[("relu", MaskActivation::Relu), ("sigmoid", MaskActivation::Sigmoid)];
const SCALES: &[(&str, AttentionScale)] = &[("channels", AttentionScale::Channels), ("bins", AttentionScale::Bins)];
const DOMAINS: &[(&str, LossDomain)] = &[("time", LossDomain::Time), ("magnitude", LossDomain::Magnitude)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> &'static str {
    options.iter().find(|(_, o)| o == v).map_or("?", |(n, _)| n)
}

impl CliConfig {
    /// Settings for the synthetic two-source fixture: a small network with a
    /// sigmoid mask, short excerpts and a faster learning rate.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.model.channels = 8;
        c.model.heads = 2;
        c.model.blocks = 1;
        c.model.mask_activation = MaskActivation::Sigmoid;
        c.train.adam.lr = 1e-3;
        c.train.excerpt_seconds = 2.0;
        c.train.max_steps = Some(200);
        c.sources = TOY_SOURCES.map(String::from).to_vec();
        c.sync_bins();
        c
    }

    fn sync_bins(&mut self) {
        self.model.freq_bins = self.train.stft.bins();
    }

    pub fn stft(&self) -> StftConfig {
        self.train.stft
    }

    pub fn mono_policy(&self) -> MonoPolicy {
        if self.dup_mono {
            MonoPolicy::Duplicate
        } else {
            MonoPolicy::Reject
        }
    }

    pub fn dataset_options(&self, root: &Path) -> DatasetOptions {
        let list = Path::new(&self.validation_list);
        let list = if list.is_absolute() { list.to_path_buf() } else { root.join(list) };
        DatasetOptions { sources: self.sources.clone(), validation_list: Some(list), mono: self.mono_policy() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key.trim() {
            "blocks" => m.blocks = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "channels" => m.channels = parse(key, v)?,
            "slices" => m.slices = parse(key, v)?,
            "input_kernel" => m.input_kernel = parse(key, v)?,
            "output_kernel" => m.output_kernel = parse(key, v)?,
            "recovery_kernel" => m.recovery_kernel = parse(key, v)?,
            "depthwise_kernel" => m.dw_kernel = parse(key, v)?,
            "mask_activation" => m.mask_activation = choice(key, v, MASKS)?,
            "attention" => m.attention = parse(key, v)?,
            "attention_scale" => m.attention_scale = choice(key, v, SCALES)?,
            "input_norm" => m.input_norm = parse(key, v)?,
            "sublayer_output_norm" => m.sublayer_output_norm = parse(key, v)?,
            "ln_eps" => m.ln_eps = parse(key, v)?,
            "window" => {
                t.stft.window = parse(key, v)?;
                t.stft.n_fft = t.stft.window;
            }
            "hop" => t.stft.hop = parse(key, v)?,
            "lr" => t.adam.lr = parse(key, v)?,
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "excerpt_seconds" => t.excerpt_seconds = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "max_steps" => {
                let n: usize = parse(key, v)?;
                t.max_steps = (n > 0).then_some(n);
            }
            "patience" => t.patience = parse(key, v)?,
            "loss_domain" => t.loss_domain = choice(key, v, DOMAINS)?,
            "gain_low" => t.augment.gain_low = parse(key, v)?,
            "gain_high" => t.augment.gain_high = parse(key, v)?,
            "swap_probability" => t.augment.swap_probability = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "sources" => {
                let list: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if list.is_empty() {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        reason: "empty source list".into(),
                    });
                }
                self.sources = list;
            }
            "validation_list" => self.validation_list = v.to_string(),
            "dup_mono" => self.dup_mono = parse(key, v)?,
            "toy_seconds" => self.toy.seconds = parse(key, v)?,
            "toy_seed" => self.toy.seed = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        self.sync_bins();
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        Some(match key {
            "blocks" => m.blocks.to_string(),
            "heads" => m.heads.to_string(),
            "channels" => m.channels.to_string(),
            "slices" => m.slices.to_string(),
            "input_kernel" => m.input_kernel.to_string(),
            "output_kernel" => m.output_kernel.to_string(),
            "recovery_kernel" => m.recovery_kernel.to_string(),
            "depthwise_kernel" => m.dw_kernel.to_string(),
            "mask_activation" => name_of(MASKS, &m.mask_activation).into(),
            "attention" => m.attention.to_string(),
            "attention_scale" => name_of(SCALES, &m.attention_scale).into(),
            "input_norm" => m.input_norm.to_string(),
            "sublayer_output_norm" => m.sublayer_output_norm.to_string(),
            "ln_eps" => m.ln_eps.to_string(),
            "window" => t.stft.window.to_string(),
            "hop" => t.stft.hop.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "batch" => t.batch.to_string(),
            "excerpt_seconds" => t.excerpt_seconds.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "max_steps" => t.max_steps.unwrap_or(0).to_string(),
            "patience" => t.patience.to_string(),
            "loss_domain" => name_of(DOMAINS, &t.loss_domain).into(),
            "gain_low" => t.augment.gain_low.to_string(),
            "gain_high" => t.augment.gain_high.to_string(),
            "swap_probability" => t.augment.swap_probability.to_string(),
            "seed" => t.seed.to_string(),
            "sources" => self.sources.join(","),
            "validation_list" => self.validation_list.clone(),
            "dup_mono" => self.dup_mono.to_string(),
            "toy_seconds" => self.toy.seconds.to_string(),
            "toy_seed" => self.toy.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_path_buf(),
                line: n + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
        self.apply_text(&text, path)
    }

    /// `key=value`, as given to `--set`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: assignment.into(),
            value: String::new(),
            reason: "expected key=value".into(),
        })?;
        self.set(k.trim(), v)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: samsnet::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        samsnet::signal::Stft::<f32>::new(self.train.stft).map_err(invalid)?;
        if !(self.toy.seconds > 0.0) {
            return Err(ConfigError::Invalid(format!("toy_seconds must be > 0, got {}", self.toy.seconds)));
        }
        Ok(())
    }

    /// Every key in a fixed order, as `key = value` lines that
    /// [`CliConfig::apply_text`] reads back.
    pub fn render(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }
}
