//! Engine configuration: one TOML or JSON document with a section per
//! module, dotted `key=value` overrides and environment fill-in.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::BackendsConfig;
use crate::dataset::SynthConfig;
use crate::grpo::GrpoConfig;
use crate::metrics::MetricsConfig;
use crate::pipeline::PipelineConfig;
use crate::retrospective::LabelerConfig;
use crate::rewards::RewardConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {format} config: {message}")]
    Parse { format: &'static str, message: String },
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("override `{key}`: {message}")]
    Override { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub rewards: RewardConfig,
    pub grpo: GrpoConfig,
    pub labeler: LabelerConfig,
    pub pipeline: PipelineConfig,
    pub backends: BackendsConfig,
    pub metrics: MetricsConfig,
    pub synth: SynthConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

/// JSON when the first non-blank character opens an object, TOML otherwise.
pub fn detect_format(text: &str) -> ConfigFormat {
    match text.trim_start().chars().next() {
        Some('{') => ConfigFormat::Json,
        _ => ConfigFormat::Toml,
    }
}

fn to_value(text: &str) -> Result<Value, ConfigError> {
    match detect_format(text) {
        ConfigFormat::Json => {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse { format: "JSON", message: e.to_string() })
        }
        ConfigFormat::Toml => {
            let t: toml::Table =
                toml::from_str(text).map_err(|e| ConfigError::Parse { format: "TOML", message: e.to_string() })?;
            serde_json::to_value(t).map_err(|e| ConfigError::Parse { format: "TOML", message: e.to_string() })
        }
    }
}

/// Scalar override value: JSON literal when it parses as one, else a string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(key.to_string()));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(ConfigError::Override { key: key.into(), message: format!("`{p}` is not a table") });
        }
        cur = cur
            .as_object_mut()
            .expect("checked above")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(m) => {
            m.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(ConfigError::Override { key: key.into(), message: "parent is not a table".into() }),
    }
}

impl EngineConfig {
    pub fn from_str_any(text: &str) -> Result<Self, ConfigError> {
        Self::from_value(to_value(text)?)
    }

    fn from_value(v: Value) -> Result<Self, ConfigError> {
        serde_json::from_value(v).map_err(|e| ConfigError::Parse { format: "config", message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_str_any(&text)
    }

    /// Applies `section.key=value` overrides on top of `self`.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut v = serde_json::to_value(&self).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (k, raw) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.to_string()))?;
            set_path(&mut v, k.trim(), parse_scalar(raw.trim()))?;
        }
        Self::from_value(v).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Override { key: "--set".into(), message },
            e => e,
        })
    }

    pub fn with_env(mut self) -> Self {
        self.backends = self.backends.with_env();
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.rewards.validate().map_err(|e| bad(&e))?;
        self.grpo.validate().map_err(|e| bad(&e))?;
        self.pipeline.validate().map_err(|e| bad(&e))?;
        if self.labeler.n_cand == 0 || self.labeler.rollouts_per_candidate == 0 {
            return Err(ConfigError::Invalid("labeler needs at least one candidate and one rollout".into()));
        }
        if self.backends.max_in_flight == 0 {
            return Err(ConfigError::Invalid("backends.max_in_flight must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::AnswerSource;
    use crate::rewards::{RewardTerm, TaskType};

    #[test]
    fn toml_and_json_agree() {
        let t = "[rewards]\npoint_thresh = 50.0\n[pipeline]\nconcurrency_cap = 3\n";
        let j = r#"{"rewards": {"point_thresh": 50.0}, "pipeline": {"concurrency_cap": 3}}"#;
        let a = EngineConfig::from_str_any(t).unwrap();
        assert_eq!(a, EngineConfig::from_str_any(j).unwrap());
        assert_eq!(a.rewards.point_thresh, 50.0);
        assert_eq!(a.pipeline.concurrency_cap, 3);
        assert_eq!(a.grpo, GrpoConfig::default());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = EngineConfig::default();
        assert_eq!(EngineConfig::from_str_any(&c.to_toml()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn overrides() {
        let c = EngineConfig::default()
            .with_overrides(&[
                "grpo.kl_coeff=0.01",
                "pipeline.answer_source=lpr",
                "rewards.disabled_terms=[\"think\"]",
                "backends.policy_url=http://localhost:9000",
            ])
            .unwrap();
        assert_eq!(c.grpo.kl_coeff, 0.01);
        assert_eq!(c.pipeline.answer_source, AnswerSource::Lpr);
        assert!(!c.rewards.enabled(RewardTerm::Think));
        assert_eq!(c.backends.policy_url.as_deref(), Some("http://localhost:9000"));
        assert!(matches!(EngineConfig::default().with_overrides(&["nonsense"]), Err(ConfigError::BadOverride(_))));
        assert!(EngineConfig::default().with_overrides(&["grpo.nope=1"]).is_err());
        assert!(EngineConfig::default().with_overrides(&["grpo..x=1"]).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(EngineConfig::from_str_any("[grpo]\ngroup_sz = 4\n").is_err());
        assert!(EngineConfig::from_str_any("[nope]\n").is_err());
    }

    #[test]
    fn prompt_templates_from_config() {
        let c = EngineConfig::default()
            .with_overrides(&["pipeline.prompts.gse.IS=\"Find {question} within {frame_width}x{frame_height}\""])
            .unwrap();
        assert!(c.pipeline.prompts.gse[&TaskType::Is].starts_with("Find"));
        let bad = EngineConfig::default().with_overrides(&["pipeline.prompts.gse.IS=\"{bogus}\""]).unwrap();
        assert!(bad.validate().is_err());
    }
}
