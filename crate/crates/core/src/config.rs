//! Run configuration as flat `key=value` lines.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{ConfigError, Error, Result};
use crate::nn::Activation;
use crate::prior::PriorKind;
use crate::vae::{DecoderVariance, LikelihoodKind, LOGVAR_MAX, LOGVAR_MIN};

/// How diffusion time steps are drawn for the training penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSampling {
    /// One step shared by the whole minibatch.
    Batch,
    /// An independent step per row.
    Element,
}

impl TimeSampling {
    pub fn name(self) -> &'static str {
        match self {
            TimeSampling::Batch => "batch",
            TimeSampling::Element => "element",
        }
    }
}

impl FromStr for TimeSampling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "batch" => Ok(TimeSampling::Batch),
            "element" => Ok(TimeSampling::Element),
            other => Err(format!("unknown t_sampling `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `eight_gaussians`, `two_moons`, `checkerboard` or `idx`.
    pub dataset: String,
    pub n_samples: usize,
    pub data_seed: u64,
    pub idx_path: Option<String>,
    pub binarize: Option<f64>,
    pub latent_dim: usize,
    pub prior: PriorKind,
    /// Diffusion step count; required for the diffusion prior.
    pub steps: Option<usize>,
    pub beta_min: f64,
    pub beta_max: f64,
    pub time_embed_dim: usize,
    pub denoiser_hidden: Vec<usize>,
    pub flow_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub likelihood: LikelihoodKind,
    pub decoder_variance: DecoderVariance,
    /// Starting log-variance of the shared decoder variance.
    pub decoder_logvar_init: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub out_dir: Option<String>,
    pub t_sampling: TimeSampling,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: "eight_gaussians".into(),
            n_samples: 2000,
            data_seed: 0,
            idx_path: None,
            binarize: None,
            latent_dim: 2,
            prior: PriorKind::Gaussian,
            steps: None,
            beta_min: 1e-3,
            beta_max: 0.2,
            time_embed_dim: 16,
            denoiser_hidden: vec![64, 64],
            flow_hidden: vec![32, 32],
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            activation: Activation::Relu,
            likelihood: LikelihoodKind::Gaussian,
            decoder_variance: DecoderVariance::Shared,
            decoder_logvar_init: 0.0,
            learning_rate: 5e-4,
            epochs: 250,
            batch_size: 128,
            seed: 0,
            validation_fraction: 0.1,
            out_dir: None,
            t_sampling: TimeSampling::Batch,
            grad_clip: 100.0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "n_samples",
    "data_seed",
    "idx_path",
    "binarize",
    "latent_dim",
    "prior",
    "T",
    "beta_min",
    "beta_max",
    "time_embed_dim",
    "denoiser_hidden",
    "flow_hidden",
    "encoder_hidden",
    "decoder_hidden",
    "activation",
    "likelihood",
    "decoder_variance",
    "decoder_logvar_init",
    "learning_rate",
    "epochs",
    "batch_size",
    "seed",
    "validation_fraction",
    "out_dir",
    "t_sampling",
    "grad_clip",
];

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        ConfigError::Parse {
            line,
            key: key.into(),
            value: value.into(),
        }
        .into()
    })
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_value(line, key, v.trim()))
        .collect()
}

fn join<T: Display>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    /// Keys missing from the text keep their defaults.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                }
                .into());
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.into(),
                }
                .into());
            }
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        TrainConfig::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = value.into(),
            "n_samples" => self.n_samples = parse_value(line, key, value)?,
            "data_seed" => self.data_seed = parse_value(line, key, value)?,
            "idx_path" => self.idx_path = Some(value.into()),
            "binarize" => self.binarize = Some(parse_value(line, key, value)?),
            "latent_dim" => self.latent_dim = parse_value(line, key, value)?,
            "prior" => self.prior = parse_value(line, key, value)?,
            "T" => self.steps = Some(parse_value(line, key, value)?),
            "beta_min" => self.beta_min = parse_value(line, key, value)?,
            "beta_max" => self.beta_max = parse_value(line, key, value)?,
            "time_embed_dim" => self.time_embed_dim = parse_value(line, key, value)?,
            "denoiser_hidden" => self.denoiser_hidden = parse_list(line, key, value)?,
            "flow_hidden" => self.flow_hidden = parse_list(line, key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse_list(line, key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse_list(line, key, value)?,
            "activation" => self.activation = parse_value(line, key, value)?,
            "likelihood" => self.likelihood = parse_value(line, key, value)?,
            "decoder_variance" => self.decoder_variance = parse_value(line, key, value)?,
            "decoder_logvar_init" => self.decoder_logvar_init = parse_value(line, key, value)?,
            "learning_rate" => self.learning_rate = parse_value(line, key, value)?,
            "epochs" => self.epochs = parse_value(line, key, value)?,
            "batch_size" => self.batch_size = parse_value(line, key, value)?,
            "seed" => self.seed = parse_value(line, key, value)?,
            "validation_fraction" => self.validation_fraction = parse_value(line, key, value)?,
            "out_dir" => self.out_dir = Some(value.into()),
            "t_sampling" => self.t_sampling = parse_value(line, key, value)?,
            "grad_clip" => self.grad_clip = parse_value(line, key, value)?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, reason: &str| -> Error {
            ConfigError::Invalid {
                key: key.into(),
                reason: reason.into(),
            }
            .into()
        };
        match self.dataset.as_str() {
            "eight_gaussians" | "two_moons" | "checkerboard" => {
                if self.n_samples < 10 {
                    return Err(invalid("n_samples", "must be at least 10"));
                }
            }
            "idx" => {
                if self.idx_path.is_none() {
                    return Err(ConfigError::MissingKey("idx_path".into()).into());
                }
            }
            _ => {
                return Err(invalid(
                    "dataset",
                    "expected eight_gaussians, two_moons, checkerboard or idx",
                ))
            }
        }
        if let Some(b) = self.binarize {
            if !(0.0..=1.0).contains(&b) {
                return Err(invalid("binarize", "threshold must lie in [0, 1]"));
            }
        }
        if self.latent_dim == 0 {
            return Err(invalid("latent_dim", "must be at least 1"));
        }
        if self.prior == PriorKind::Diffusion {
            match self.steps {
                None => return Err(ConfigError::MissingKey("T".into()).into()),
                Some(0) => return Err(invalid("T", "must be at least 1")),
                Some(_) => {}
            }
            if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
                return Err(invalid("beta_min", "need 0 < beta_min <= beta_max < 1"));
            }
        }
        for (key, list) in [
            ("denoiser_hidden", &self.denoiser_hidden),
            ("flow_hidden", &self.flow_hidden),
            ("encoder_hidden", &self.encoder_hidden),
            ("decoder_hidden", &self.decoder_hidden),
        ] {
            if list.contains(&0) {
                return Err(invalid(key, "layer widths must be positive"));
            }
        }
        if self.prior == PriorKind::Flow && self.flow_hidden.is_empty() {
            return Err(invalid(
                "flow_hidden",
                "the flow conditioner needs a hidden layer",
            ));
        }
        if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&self.decoder_logvar_init) {
            return Err(invalid(
                "decoder_logvar_init",
                "must lie inside the log-variance clamp",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(invalid("validation_fraction", "must lie in (0, 0.5)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(invalid("grad_clip", "must be positive"));
        }
        Ok(())
    }

    /// Serializes every set field; `parse(to_kv())` reproduces `self`.
    pub fn to_kv(&self) -> String {
        let mut lines = vec![
            format!("dataset={}", self.dataset),
            format!("n_samples={}", self.n_samples),
            format!("data_seed={}", self.data_seed),
        ];
        if let Some(p) = &self.idx_path {
            lines.push(format!("idx_path={p}"));
        }
        if let Some(b) = self.binarize {
            lines.push(format!("binarize={b}"));
        }
        lines.push(format!("latent_dim={}", self.latent_dim));
        lines.push(format!("prior={}", self.prior.name()));
        if let Some(t) = self.steps {
            lines.push(format!("T={t}"));
        }
        lines.extend([
            format!("beta_min={}", self.beta_min),
            format!("beta_max={}", self.beta_max),
            format!("time_embed_dim={}", self.time_embed_dim),
            format!("denoiser_hidden={}", join(&self.denoiser_hidden)),
            format!("flow_hidden={}", join(&self.flow_hidden)),
            format!("encoder_hidden={}", join(&self.encoder_hidden)),
            format!("decoder_hidden={}", join(&self.decoder_hidden)),
            format!("activation={}", self.activation.name()),
            format!("likelihood={}", self.likelihood.name()),
            format!("decoder_variance={}", self.decoder_variance.name()),
            format!("decoder_logvar_init={}", self.decoder_logvar_init),
            format!("learning_rate={}", self.learning_rate),
            format!("epochs={}", self.epochs),
            format!("batch_size={}", self.batch_size),
            format!("seed={}", self.seed),
            format!("validation_fraction={}", self.validation_fraction),
        ]);
        if let Some(o) = &self.out_dir {
            lines.push(format!("out_dir={o}"));
        }
        lines.push(format!("t_sampling={}", self.t_sampling.name()));
        lines.push(format!("grad_clip={}", self.grad_clip));
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}
