//! Experiment configuration: a TOML file with five sections (`env`,
//! `reward`, `encoder`, `ppo`, `run`), every key optional with documented
//! defaults, unknown keys rejected. Values can be overridden through
//! environment variables named `RELNET_<SECTION>__<KEY>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::EncoderConfig;
use crate::env::{EnvConfig, RewardConfig};
use crate::ppo::PpoHyper;

/// Environment-variable override prefix.
pub const ENV_PREFIX: &str = "RELNET_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override {var}: {message}")]
    Override { var: String, message: String },
    #[error("invalid config value: {0}")]
    Invalid(String),
}

/// Run-level settings: budget, seeding, cadences, output location.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub total_steps: u64,
    pub seed: u64,
    /// Deterministic evaluation every this many updates (0 disables).
    pub eval_every_updates: u64,
    pub eval_episodes: u32,
    /// Checkpoint every this many updates (0 = final checkpoint only).
    pub checkpoint_every_updates: u64,
    pub out_dir: String,
    pub name: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            total_steps: 3_000_000,
            seed: 0,
            eval_every_updates: 5,
            eval_episodes: 200,
            checkpoint_every_updates: 25,
            out_dir: "runs/default".into(),
            name: "run".into(),
        }
    }
}

/// The full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub reward: RewardConfig,
    pub encoder: EncoderConfig,
    pub ppo: PpoHyper,
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Parse a TOML string (no environment overrides).
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, apply `RELNET_*` environment overrides, validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::load_with_overrides(&text, std::env::vars())
    }

    /// Parse `text`, then apply overrides of the form
    /// `RELNET_<SECTION>__<KEY>=<toml value>` taken from `vars`.
    pub fn load_with_overrides(
        text: &str,
        vars: impl Iterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        // Strict parse first: toml errors carry line and key names.
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;

        let overrides: Vec<(String, String)> = vars
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        let cfg = if overrides.is_empty() {
            cfg
        } else {
            let mut table = toml::Table::try_from(&cfg)
                .map_err(|e| ConfigError::Parse(e.to_string()))?;
            for (var, raw) in overrides {
                apply_override(&mut table, &var, &raw)?;
            }
            table
                .try_into()
                .map_err(|e: toml::de::Error| ConfigError::Override {
                    var: "RELNET_*".into(),
                    message: e.to_string(),
                })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize so that `parse(serialize(c)) == c`.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Range and consistency checks, naming the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(ConfigError::Invalid)?;
        self.encoder.validate().map_err(ConfigError::Invalid)?;
        self.ppo.validate().map_err(ConfigError::Invalid)?;
        if !(0.0..=1.0).contains(&self.reward.beta) {
            return Err(ConfigError::Invalid(format!(
                "reward.beta = {} outside [0, 1]",
                self.reward.beta
            )));
        }
        if self.run.name.is_empty() {
            return Err(ConfigError::Invalid("run.name must not be empty".into()));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, var: &str, raw: &str) -> Result<(), ConfigError> {
    let path = &var[ENV_PREFIX.len()..];
    let (section, key) = path.split_once("__").ok_or_else(|| ConfigError::Override {
        var: var.into(),
        message: "expected RELNET_<SECTION>__<KEY>".into(),
    })?;
    let section = section.to_ascii_lowercase();
    let key = key.to_ascii_lowercase();

    let value = parse_toml_value(raw);
    let entry = table
        .get_mut(&section)
        .and_then(|v| v.as_table_mut())
        .ok_or_else(|| ConfigError::Override {
            var: var.into(),
            message: format!("unknown section {section:?}"),
        })?;
    if !entry.contains_key(&key) {
        return Err(ConfigError::Override {
            var: var.into(),
            message: format!("unknown key {section}.{key}"),
        });
    }
    entry.insert(key, value);
    Ok(())
}

/// Interpret an override string as a TOML value, falling back to a string.
fn parse_toml_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    if let Ok(t) = probe.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;

    #[test]
    fn empty_file_gives_all_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.encoder.kind, EncoderKind::Lrn);
        assert_eq!(cfg.encoder.d_z, 25);
        assert_eq!(cfg.env.n_cubes, 3, "2 distractors");
        assert_eq!(cfg.ppo.discount, 0.98);
        assert_eq!(cfg.ppo.learning_rate, 2.5e-4);
        assert_eq!(cfg.ppo.minibatches, 40);
        assert_eq!(cfg.ppo.epochs, 4);
        assert_eq!(cfg.ppo.clip_ratio, 0.5);
        assert_eq!(cfg.ppo.gae_lambda, 0.95);
        assert_eq!(cfg.reward.alpha1, 100.0);
        assert_eq!(cfg.reward.alpha2, 250.0);
        assert_eq!(cfg.reward.alpha3, 10.0);
        assert_eq!(cfg.reward.beta, 0.05);
    }

    #[test]
    fn encoder_kind_selects_variant() {
        let cfg = ExperimentConfig::from_toml("[encoder]\nkind = \"RN\"\n").unwrap();
        assert_eq!(cfg.encoder.kind, EncoderKind::Rn);
    }

    #[test]
    fn out_of_range_discount_rejected_with_key_name() {
        let err = ExperimentConfig::from_toml("[ppo]\ndiscount = 1.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("discount"), "{msg}");
        assert!(msg.contains("1.5"), "{msg}");
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let err = ExperimentConfig::from_toml("[ppo]\nlearning_rte = 1e-4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rte"), "{msg}");
        assert!(msg.to_lowercase().contains("line"), "{msg}");
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder.kind = EncoderKind::Attn;
        cfg.encoder.d_z = 50;
        cfg.ppo.learning_rate = 1.25e-4;
        cfg.reward.curiosity = false;
        cfg.run.seed = 17;
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn env_override_applies_and_unknown_override_fails() {
        let vars = vec![("RELNET_PPO__EPOCHS".to_string(), "2".to_string())];
        let cfg = ExperimentConfig::load_with_overrides("", vars.into_iter()).unwrap();
        assert_eq!(cfg.ppo.epochs, 2);

        let vars = vec![("RELNET_PPO__EPOCH".to_string(), "2".to_string())];
        let err = ExperimentConfig::load_with_overrides("", vars.into_iter()).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_random_configs(
            seed in 0u64..1_000_000,
            dz in 1usize..200,
            lr in 0.0f64..1.0,
            steps in 0u64..10_000_000,
        ) {
            let mut cfg = ExperimentConfig::default();
            cfg.run.seed = seed;
            cfg.encoder.d_z = dz;
            cfg.ppo.learning_rate = lr;
            cfg.run.total_steps = steps;
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            proptest::prop_assert_eq!(cfg, back);
        }
    }
}
