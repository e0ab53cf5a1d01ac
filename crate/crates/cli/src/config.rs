//! The experiment configuration: one JSON document with a section per stage.

use std::fmt;
use std::path::{Path, PathBuf};

use hype_core::dynamics::ModelMode;
use hype_core::encoder::{Encoder, EncoderKind, EncoderSpec, StateUniverse};
use hype_core::pipeline::{AdaptConfig, MetaTrainConfig, Method};
use hype_core::planning::{MpcConfig, PlannerConfig};
use hype_core::separation::SeparationFunction;
use hype_core::theory::TheoryConfig;
use serde::{Deserialize, Serialize};

/// A problem with the configuration or the inputs it names. Maps to exit
/// code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn at(path: &str, message: impl fmt::Display) -> Self {
        Self(format!("{path}: {message}"))
    }
}

impl From<hype_core::Error> for ConfigError {
    fn from(e: hype_core::Error) -> Self {
        Self(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Stone features; the action set is one potion per feature plus turn-in.
    pub n_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub env: EnvConfig,
    pub encoder: EncoderSpec,
    pub meta_train: MetaTrainConfig,
    /// MPC episodes per model when scoring each model on its own task.
    #[serde(default = "default_own_task_episodes")]
    pub own_task_episodes: usize,
    pub planner: PlannerConfig,
    #[serde(default)]
    pub mpc: MpcConfig,
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_own_task_episodes() -> usize {
    50
}

impl ExperimentConfig {
    /// Laptop-sized run on `n_features`-feature Alchemy.
    pub fn desk(n_features: usize) -> Self {
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            env: EnvConfig { n_features },
            encoder: EncoderSpec::new(EncoderKind::RandomProjection, 64, 0),
            meta_train: MetaTrainConfig::desk(),
            own_task_episodes: default_own_task_episodes(),
            planner: PlannerConfig::new(4, SeparationFunction::Cd),
            mpc: MpcConfig::default(),
            adapt: AdaptConfig::new(Method::Hype),
            theory: TheoryConfig::default(),
        }
    }

    pub fn paper_scale(n_features: usize) -> Self {
        Self {
            meta_train: MetaTrainConfig::paper_scale(),
            ..Self::desk(n_features)
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn universe(&self) -> StateUniverse {
        StateUniverse::Alchemy {
            n_features: self.env.n_features,
        }
    }

    /// Checks every section and the constraints between them.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(2..=7).contains(&self.env.n_features) {
            return Err(ConfigError::at("env.n_features", format!("must lie in 2..=7, got {}", self.env.n_features)));
        }
        Encoder::new(self.encoder.clone(), self.universe()).map_err(|e| ConfigError::at("encoder", e))?;
        self.meta_train.validate()?;
        if self.meta_train.n_tasks < 2 {
            return Err(ConfigError::at("meta_train.n_tasks", "selection needs at least two tasks"));
        }
        if self.own_task_episodes == 0 {
            return Err(ConfigError::at("own_task_episodes", "must be at least 1"));
        }
        self.planner.validate()?;
        if !self.planner.separation.function.supports(ModelMode::Deterministic) {
            return Err(ConfigError::at(
                "planner.separation.function",
                format!("{} does not apply to the meta-trained models", self.planner.separation.function),
            ));
        }
        self.mpc.validate()?;
        self.adapt.validate()?;
        self.theory.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_round_trip_and_validate() {
        for cfg in [ExperimentConfig::desk(3), ExperimentConfig::desk(4), ExperimentConfig::paper_scale(3)] {
            cfg.validate().unwrap();
            assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::desk(3).to_json().replace("\"n_candidates\"", "\"n_candidate\"");
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(err.0.contains("n_candidate"), "{err}");
    }

    #[test]
    fn field_paths_in_messages() {
        let mut cfg = ExperimentConfig::desk(3);
        cfg.planner.k = 0;
        assert!(cfg.validate().unwrap_err().0.contains("planner.k"));
        let mut cfg = ExperimentConfig::desk(3);
        cfg.env.n_features = 1;
        assert!(cfg.validate().unwrap_err().0.contains("env.n_features"));
        let mut cfg = ExperimentConfig::desk(3);
        cfg.meta_train.n_tasks = 1;
        assert!(cfg.validate().unwrap_err().0.contains("meta_train.n_tasks"));
    }

    #[test]
    fn sections_have_defaults() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::desk(3).to_json()).unwrap();
        let obj = v.as_object_mut().unwrap();
        for key in ["seed", "out_dir", "mpc", "theory", "own_task_episodes"] {
            obj.remove(key);
        }
        let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg, ExperimentConfig::desk(3));
    }
}
