//! Flat key/value run configuration. Every key has a default; files are TOML
//! without tables, and `key=value` overrides are applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::TopicLossKind;
use crate::topic_mining::MiningConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of latent topics.
    pub k: usize,
    /// LSTM hidden size; also the word embedding size (tied output weights).
    pub hidden_size: usize,
    /// Factor count of the topic-factorized gate matrices.
    pub factors: usize,
    pub predictor_hidden: usize,
    pub lambda: f64,
    pub topic_loss: TopicLossKind,
    pub lr: f64,
    /// Stage-1 learning rate; `lr` when unset.
    pub predictor_lr: Option<f64>,
    pub dropout: f64,
    pub batch_size: usize,
    pub predictor_batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    /// Epochs without validation improvement before a stage stops.
    pub patience: usize,
    /// Fraction of training records held out to validate the topic predictor.
    pub predictor_holdout: f64,
    pub beam_width: usize,
    pub max_len: usize,
    pub length_normalize: bool,
    pub seed: u64,
    pub w_text: f64,
    pub w_vis: f64,
    pub temperature: f64,
    pub restarts: usize,
    pub max_iters: usize,
    pub factorize_recurrent: bool,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            hidden_size: 32,
            factors: 32,
            predictor_hidden: 64,
            lambda: 0.25,
            topic_loss: TopicLossKind::L2,
            lr: 1e-4,
            predictor_lr: None,
            dropout: 0.5,
            batch_size: 16,
            predictor_batch_size: 32,
            stage1_epochs: 200,
            stage2_epochs: 100,
            stage3_epochs: 50,
            patience: 20,
            predictor_holdout: 0.1,
            beam_width: 5,
            max_len: 20,
            length_normalize: false,
            seed: 0,
            w_text: 1.0,
            w_vis: 0.2,
            temperature: 1.0,
            restarts: 10,
            max_iters: 100,
            factorize_recurrent: true,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.lambda) {
            return bad(format!("lambda {} must lie in [0, 1)", self.lambda));
        }
        for (name, v) in [
            ("k", self.k),
            ("hidden_size", self.hidden_size),
            ("factors", self.factors),
            ("predictor_hidden", self.predictor_hidden),
            ("batch_size", self.batch_size),
            ("predictor_batch_size", self.predictor_batch_size),
            ("beam_width", self.beam_width),
            ("max_len", self.max_len),
            ("restarts", self.restarts),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.predictor_holdout) {
            return bad("predictor_holdout must lie in [0, 1)".into());
        }
        if self.lr <= 0.0 || self.predictor_lr.is_some_and(|v| v <= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive".into());
        }
        if self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn predictor_lr(&self) -> f64 {
        self.predictor_lr.unwrap_or(self.lr)
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            k: self.k,
            w_text: self.w_text,
            w_vis: self.w_vis,
            temperature: self.temperature,
            restarts: self.restarts,
            max_iters: self.max_iters,
            seed: self.seed,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Applies `key=value` overrides; values use TOML syntax, bare words are
    /// taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        apply_overrides(self, overrides)
    }
}

/// Applies `key=value` overrides to any flat serde struct.
pub fn apply_overrides<T, S>(base: &T, overrides: &[S]) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
    S: AsRef<str>,
{
    let mut table: toml::Table =
        toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        let o = o.as_ref();
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = parse_value(raw);
        table.insert(key.to_string(), value);
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.dropout, 0.5);
        assert_eq!(c.beam_width, 5);
        assert_eq!((c.w_text, c.w_vis), (1.0, 0.2));
    }

    #[test]
    fn overrides_apply() {
        let c = TrainConfig::default()
            .with_overrides(&["k=3", "lambda = 0.5", "topic_loss=kl", "predictor_lr=0.01"])
            .unwrap();
        assert_eq!(c.k, 3);
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.topic_loss, TopicLossKind::Kl);
        assert_eq!(c.predictor_lr(), 0.01);
        assert!(TrainConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(TrainConfig::default().with_overrides(&["k"]).is_err());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = TrainConfig::from_toml_str("k = 7\nseed = 3\n").unwrap();
        assert_eq!(c.k, 7);
        assert_eq!(c.seed, 3);
        assert_eq!(c.hidden_size, TrainConfig::default().hidden_size);
        assert!(TrainConfig::from_toml_str("lambda = 1.0").is_err());
    }
}
