//! Run configuration file: plain TOML with `[synth]`, `[task]`, `[encoder]`,
//! `[train]` and `[eval]` sections. Missing keys take defaults; unknown keys are
//! rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::corpus::SynthConfig;
use crate::eval::ProbeConfig;
use crate::model::EncoderConfig;
use crate::taskgen::TaskConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub task: TaskConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: ProbeConfig,
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (v, known.get(k)) {
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &path, out),
            (_, Some(_)) => {}
            (_, None) => out.push(path),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::Config(m);
        let given: toml::Table = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        let known: toml::Table =
            toml::Table::try_from(&cfg).map_err(|e| bad(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&given, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(bad(format!("unknown keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse(&fs::read_to_string(path)?)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// One seed for corpus synthesis and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Cross-section consistency. `encoder.vocab_size = 0` means "take it
    /// from the vocabulary".
    pub fn validate(&self) -> Result<(), TrainError> {
        let pairs = [
            ("encoder.geohash_chars vs task.geohash_chars", self.encoder.geohash_chars, self.task.geohash_chars),
            ("encoder.phrase_classes vs task.max_phrases", self.encoder.phrase_classes, self.task.max_phrases),
            (
                "encoder.token_classes vs task.max_phrase_tokens",
                self.encoder.token_classes,
                self.task.max_phrase_tokens,
            ),
        ];
        for (what, a, b) in pairs {
            if a != b {
                return Err(TrainError::Config(format!("{what}: {a} != {b}")));
            }
        }
        if !(0.0..1.0).contains(&self.eval.holdout_fraction) {
            return Err(TrainError::Config(format!(
                "eval.holdout_fraction {} outside [0, 1)",
                self.eval.holdout_fraction
            )));
        }
        self.synth
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.train.validate()
    }

    /// Encoder config with the vocabulary size filled in.
    pub fn encoder_for(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            ..self.encoder.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::parse("[train]\nlr = 0.001\nucbl = false\n[encoder]\nd_model = 32\n").unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert!(!c.train.tasks.ucbl);
        assert!(c.train.tasks.ptop);
        assert_eq!(c.encoder.d_model, 32);
        assert_eq!(c.synth, SynthConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
    }

    #[test]
    fn inconsistent_sections_rejected() {
        assert!(RunConfig::parse("[task]\nmax_phrases = 4\n").is_err());
        assert!(RunConfig::parse("[task]\nmax_phrases = 4\n[encoder]\nphrase_classes = 4\n").is_ok());
    }
}
