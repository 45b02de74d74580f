use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::TierEmptyPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Trainable BiLSTM over a token vocabulary built from the training set.
    Toy,
    /// Frozen features read from a file.
    Precomputed,
}

/// How the gold order used for teacher forcing is found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingPass {
    /// A free-running pass yields the distributions that are matched; a
    /// second, teacher-forced pass over the matched order carries the loss.
    TwoPass,
    /// The loss is taken on the free-running pass itself.
    SinglePass,
}

/// How per-step label scores are combined for the attribute graph loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BagAggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderKind,
    /// Encoder width; `None` picks 16 for the toy encoder and 768 for
    /// precomputed features.
    pub d_h: Option<usize>,
    /// Token embedding width of the toy encoder.
    pub toy_token_dim: usize,
    pub d_s: usize,
    pub d_e: usize,
    pub d_g: usize,
    /// Attention width; `None` means `d_s`.
    pub attention_dim: Option<usize>,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr: f64,
    pub dropout: f64,
    pub theta_c: f64,
    pub theta_s: f64,
    pub lambda: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub matching: MatchingPass,
    pub bag_aggregation: BagAggregation,
    pub tier_empty: TierEmptyPolicy,
    /// Threads computing per-instance gradients. Results do not depend on it.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Toy,
            d_h: None,
            toy_token_dim: 16,
            d_s: 868,
            d_e: 100,
            d_g: 100,
            attention_dim: None,
            batch_size: 32,
            lr_encoder: 5e-5,
            lr: 1e-3,
            dropout: 0.6,
            theta_c: 0.1,
            theta_s: 0.2,
            lambda: 1.0,
            max_steps: 30,
            seed: 13,
            epochs: 20,
            patience: 5,
            clip_norm: 5.0,
            matching: MatchingPass::TwoPass,
            bag_aggregation: BagAggregation::Mean,
            tier_empty: TierEmptyPolicy::Skip,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn hidden_size(&self) -> usize {
        self.d_h.unwrap_or(match self.encoder {
            EncoderKind::Toy => 16,
            EncoderKind::Precomputed => 768,
        })
    }

    pub fn attention_size(&self) -> usize {
        self.attention_dim.unwrap_or(self.d_s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d_s", self.d_s),
            ("d_e", self.d_e),
            ("d_g", self.d_g),
            ("toy_token_dim", self.toy_token_dim),
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("workers", self.workers),
            ("d_h", self.hidden_size()),
            ("attention_dim", self.attention_size()),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.encoder == EncoderKind::Toy && !self.hidden_size().is_multiple_of(2) {
            return bad(format!(
                "toy encoder needs an even d_h, got {}",
                self.hidden_size()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.theta_c) {
            return bad(format!("theta_c must lie in [0, 1], got {}", self.theta_c));
        }
        if self.theta_s.is_nan() || self.theta_s < 0.0 {
            return bad(format!(
                "theta_s must be non-negative, got {}",
                self.theta_s
            ));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("lr", self.lr),
            ("lr_encoder", self.lr_encoder),
            ("clip_norm", self.clip_norm),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides. Keys must name existing fields; values
    /// are parsed as JSON, falling back to a bare string.
    pub fn with_overrides<'a>(
        &self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let obj = value
            .as_object_mut()
            .expect("config serialises to an object");
        for (key, raw) in overrides {
            if !obj.contains_key(key) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            let parsed = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert(key.to_string(), parsed);
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.d_s, 868);
        assert_eq!(c.d_e, 100);
        assert_eq!(c.d_g, 100);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.lr_encoder, 5e-5);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.dropout, 0.6);
        assert_eq!(c.theta_c, 0.1);
        assert_eq!(c.theta_s, 0.2);
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.max_steps, 30);
        assert_eq!(c.matching, MatchingPass::TwoPass);
        assert_eq!(c.bag_aggregation, BagAggregation::Mean);
        let p = RunConfig {
            encoder: EncoderKind::Precomputed,
            ..c
        };
        assert_eq!(p.hidden_size(), 768);
        p.validate().unwrap();
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides([("theta_s", "1"), ("matching", "single_pass"), ("d_h", "32")])
            .unwrap();
        assert_eq!(c.theta_s, 1.0);
        assert_eq!(c.matching, MatchingPass::SinglePass);
        assert_eq!(c.hidden_size(), 32);
        assert!(RunConfig::default()
            .with_overrides([("nope", "1")])
            .is_err());
        assert!(RunConfig::default()
            .with_overrides([("dropout", "1.5")])
            .is_err());
        assert!(RunConfig::default()
            .with_overrides([("batch_size", "x")])
            .is_err());
    }

    #[test]
    fn partial_json_uses_defaults_and_rejects_unknown_keys() {
        let c = RunConfig::from_json(r#"{"d_s": 8}"#).unwrap();
        assert_eq!((c.d_s, c.batch_size), (8, 32));
        assert!(RunConfig::from_json(r#"{"ds": 8}"#).is_err());
    }
}
