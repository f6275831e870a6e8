use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::{L2Aggregation, DEFAULT_BINS};
use crate::dialoguesim::{SimConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, StateSource};
use crate::tracker::{BeliefMode, TrackerConfig, TrainConfig};

pub const CONFIG_SCHEMA: &str = "beliefunc.config/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            valid: 200,
            test: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    /// Share of the training dialogues each member sees.
    pub fraction: f64,
    /// Worker threads for member training.
    pub threads: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 10,
            fraction: 0.7,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    End,
    End2,
}

impl DistillMode {
    pub const ALL: [DistillMode; 2] = [DistillMode::End, DistillMode::End2];

    pub fn as_str(self) -> &'static str {
        match self {
            DistillMode::End => "end",
            DistillMode::End2 => "end2",
        }
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end" => Ok(DistillMode::End),
            "end2" => Ok(DistillMode::End2),
            _ => Err(Error::Config(format!(
                "unknown distillation mode `{s}` (end|end2)"
            ))),
        }
    }
}

/// Which belief tracker feeds the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerChoice {
    /// The first ensemble member.
    Single,
    Ensemble,
    End,
    End2,
}

impl TrackerChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackerChoice::Single => "single",
            TrackerChoice::Ensemble => "ensemble",
            TrackerChoice::End => "end",
            TrackerChoice::End2 => "end2",
        }
    }
}

impl fmt::Display for TrackerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrackerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TrackerChoice::Single),
            "ensemble" => Ok(TrackerChoice::Ensemble),
            "end" => Ok(TrackerChoice::End),
            "end2" => Ok(TrackerChoice::End2),
            _ => Err(Error::Config(format!(
                "unknown tracker `{s}` (single|ensemble|end|end2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub bins: usize,
    pub l2: L2Aggregation,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            l2: L2Aggregation::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub mode: BeliefMode,
    pub tracker: TrackerChoice,
    pub source: StateSource,
    pub eval_dialogues: usize,
    pub train: PolicyConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            mode: BeliefMode::Confidence,
            tracker: TrackerChoice::End2,
            source: StateSource::Predicted,
            eval_dialogues: 500,
            train: PolicyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub sim: SimConfig,
    pub corpus: CorpusSizes,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub distill_mode: DistillMode,
    pub calibration: CalibrationConfig,
    pub policy: PolicySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA.into(),
            seed: 0,
            out: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            sim: SimConfig::default(),
            corpus: CorpusSizes::default(),
            tracker: TrackerConfig::default(),
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            distill_mode: DistillMode::End2,
            calibration: CalibrationConfig::default(),
            policy: PolicySection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    what: "config".into(),
                    path: path.to_path_buf(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported config schema `{}`",
                self.schema
            )));
        }
        self.world.validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        let c = &self.corpus;
        if c.train == 0 || c.valid == 0 || c.test == 0 {
            return Err(Error::Config(
                "every corpus split needs at least one dialogue".into(),
            ));
        }
        let e = &self.ensemble;
        if e.members == 0 || e.threads == 0 || !(e.fraction > 0.0 && e.fraction <= 1.0) {
            return Err(Error::Config(
                "ensemble needs members ≥ 1, threads ≥ 1, fraction in (0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.sim.noise) || self.sim.max_turns == 0 {
            return Err(Error::Config(
                "noise must lie in [0, 1] and max_turns be positive".into(),
            ));
        }
        if self.calibration.bins == 0 {
            return Err(Error::Config("calibration needs at least one bin".into()));
        }
        let p = &self.policy;
        if p.eval_dialogues == 0 || p.train.hidden == 0 || p.train.pretrain_batch == 0 {
            return Err(Error::Config("policy sizes must be positive".into()));
        }
        let ppo = &p.train.ppo;
        if !(ppo.clip > 0.0)
            || !(0.0..=1.0).contains(&ppo.gamma)
            || !(0.0..=1.0).contains(&ppo.lambda)
        {
            return Err(Error::Config(
                "ppo clip must be positive, gamma and lambda in [0, 1]".into(),
            ));
        }
        if ppo.dialogues_per_update == 0 || ppo.minibatch == 0 {
            return Err(Error::Config("ppo batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_configs_fill_defaults() {
        let c = ExperimentConfig::from_json(r#"{"seed": 4, "ensemble": {"members": 3}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.ensemble.members, 3);
        assert_eq!(c.ensemble.fraction, 0.7);
        assert_eq!(c.corpus, CorpusSizes::default());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"bogus": 1}"#),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_json(r#"{"ensemble": {"fraction": 0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema": "other/9"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"policy": {"mode": "psychic"}}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(
            ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(),
            c
        );
    }
}
