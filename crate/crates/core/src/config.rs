//! Run configuration file.
//!
//! Parsing is strict: unknown keys anywhere in the document are rejected,
//! and every omitted field takes its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GroupThresholds;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::prompt::{ContextInit, PromptMode};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Linear head on frozen image embeddings; no prompts, no embedding loss.
    LinearProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub baseline: Baseline,
    pub head_min: usize,
    pub tail_max: usize,
    /// Size of the generated held-out split when no evaluation file is given.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr0: 5e-3,
            batch_size: 2,
            seed: 7,
            momentum: 0.0,
            weight_decay: 0.0,
            eval_every: 1,
            baseline: Baseline::None,
            head_min: 100,
            tail_max: 20,
            eval_samples: 2000,
        }
    }
}

impl TrainConfig {
    pub fn thresholds(&self) -> GroupThresholds {
        GroupThresholds {
            head_min: self.head_min,
            tail_max: self.tail_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("train.lr0", "must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and >= 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub mode: PromptMode,
    /// Number of context tokens `M`.
    pub context_len: usize,
    pub init: ContextInit,
    /// Logit temperature `τ`.
    pub temperature: f64,
    /// Token width; defaults to the embedding dimension.
    pub token_dim: Option<usize>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::ClassSpecific,
            context_len: 64,
            init: ContextInit::default(),
            temperature: 1.0,
            token_dim: None,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 {
            return Err(Error::config("prompt.context_len", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("prompt.temperature", "must be finite and > 0"));
        }
        if self.token_dim == Some(0) {
            return Err(Error::config("prompt.token_dim", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub encoder_seed: u64,
    pub prompt: PromptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            encoder_seed: 7,
            prompt: PromptConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.prompt.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Uses `seed` for both data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"loss": {"lamda": 0.3}}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn partial_document_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}, "prompt": {"mode": "shared"}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr0, 5e-3);
        assert_eq!(cfg.prompt.mode, PromptMode::Shared);
        assert_eq!(cfg.loss, LossConfig::default());
    }

    #[test]
    fn echo_reparses_equal() {
        let mut cfg = RunConfig::default();
        cfg.loss.lambda = 0.25;
        cfg.prompt.init = ContextInit::Template;
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_name_their_field() {
        let err = RunConfig::from_json(r#"{"train": {"lr0": 0.0}}"#).unwrap_err();
        assert!(err.to_string().contains("train.lr0"));
        let err = RunConfig::from_json(r#"{"synth": {"num_samples": 5}}"#).unwrap_err();
        assert!(err.to_string().contains("num_samples < num_classes"));
    }
}
