//! Flat JSON run configuration.
//!
//! One file pins everything a run needs — model shape, strategy, budgets,
//! seed — so results are reproducible from a single artifact. Unknown keys
//! are rejected rather than ignored.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::strategies::{StrategyConfig, StrategyKind};

/// A byte budget: a number or the string `"unlimited"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget(pub u64);

impl Budget {
    pub const UNLIMITED: Budget = Budget(u64::MAX);

    pub fn bytes(&self) -> u64 {
        self.0
    }

    pub fn is_unlimited(&self) -> bool {
        self.0 == u64::MAX
    }
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        if self.is_unlimited() {
            ser.serialize_str("unlimited")
        } else {
            ser.serialize_u64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(n) => Ok(Budget(n)),
            Raw::Text(s) if s == "unlimited" => Ok(Budget::UNLIMITED),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "budget must be a byte count or \"unlimited\", got {s:?}"
            ))),
        }
    }
}

impl std::str::FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "unlimited" {
            return Ok(Budget::UNLIMITED);
        }
        s.parse::<u64>()
            .map(Budget)
            .map_err(|e| format!("invalid budget {s:?}: {e}"))
    }
}

/// Everything one experiment run needs, flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Model shape.
    pub layers: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
    pub element_width: usize,

    // Run parameters.
    pub seed: u64,
    pub strategy: StrategyKind,
    pub partition_size: usize,
    pub offload: bool,
    pub seq_len: usize,
    pub decode_tokens: usize,

    // Budgets and the simulated link.
    pub device_budget: Budget,
    pub host_budget: Budget,
    pub bandwidth: u64,
    pub staging_bytes: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::desk_scale();
        Self {
            layers: m.layers,
            hidden_dim: m.hidden_dim,
            intermediate_dim: m.intermediate_dim,
            vocab_size: m.vocab_size,
            n_heads: m.n_heads,
            n_kv_heads: m.n_kv_heads,
            head_dim: m.head_dim,
            rope_theta: m.rope_theta,
            norm_eps: m.norm_eps,
            element_width: m.element_width,
            seed: m.seed,
            strategy: StrategyKind::Standard,
            partition_size: 2048,
            offload: false,
            seq_len: 1024,
            decode_tokens: 200,
            device_budget: Budget::UNLIMITED,
            host_budget: Budget::UNLIMITED,
            bandwidth: crate::memtrack::DEFAULT_BANDWIDTH,
            staging_bytes: 0,
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(serde_json::Error),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config io error: {e}"),
            ConfigError::Parse(e) => write!(f, "config parse error: {e}"),
            ConfigError::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(ConfigError::Parse)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_config()
            .validate()
            .map_err(ConfigError::Invalid)?;
        self.strategy_config()
            .validate()
            .map_err(ConfigError::Invalid)?;
        if self.seq_len == 0 {
            return Err(ConfigError::Invalid("seq_len must be at least 1".into()));
        }
        if self.bandwidth == 0 {
            return Err(ConfigError::Invalid("bandwidth must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            intermediate_dim: self.intermediate_dim,
            vocab_size: self.vocab_size,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            rope_theta: self.rope_theta,
            norm_eps: self.norm_eps,
            seed: self.seed,
            element_width: self.element_width,
        }
    }

    pub fn strategy_config(&self) -> StrategyConfig {
        StrategyConfig {
            kind: self.strategy,
            partition_size: self.partition_size,
            offload: self.offload,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_object() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(cfg.device_budget.is_unlimited());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"layres": 4}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn budgets_parse_number_or_unlimited() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"device_budget": 12345, "host_budget": "unlimited"}"#)
                .unwrap();
        assert_eq!(cfg.device_budget.bytes(), 12345);
        assert!(cfg.host_budget.is_unlimited());

        assert!(serde_json::from_str::<RunConfig>(r#"{"device_budget": "lots"}"#).is_err());
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let mut cfg = RunConfig::default();
        cfg.strategy = StrategyKind::MiniSequence;
        cfg.offload = true;
        cfg.device_budget = Budget(99_000_000);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn strategy_names_are_stable() {
        let cfg: RunConfig = serde_json::from_str(r#"{"strategy": "miniseq"}"#).unwrap();
        assert_eq!(cfg.strategy, StrategyKind::MiniSequence);
        let cfg: RunConfig = serde_json::from_str(r#"{"strategy": "chunked"}"#).unwrap();
        assert_eq!(cfg.strategy, StrategyKind::ChunkedPrefill);
    }
}
