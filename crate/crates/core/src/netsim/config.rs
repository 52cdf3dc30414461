use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LatencyModel, NodeBehavior, Profile};
use crate::learner::{LearnerConfig, SyntheticSpec};
use crate::sync::SyncPolicy;
use crate::time::{Ticks, VirtualTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCondition {
    /// Stop once this many rounds have closed.
    Rounds(u64),
    /// Process every event up to and including this time.
    VirtualTime(VirtualTime),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx { images: PathBuf, labels: PathBuf },
}

/// Sizes of the disjoint slices cut from the dataset: one held-out test set,
/// one shard per trainer and one per validator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub test: usize,
    pub trainer_shard: usize,
    pub validator_shard: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    pub enabled: bool,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Largest accuracy drop a validator still accepts.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_eta() -> f64 {
    10.0
}

fn default_tolerance() -> f64 {
    0.05
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { enabled: false, eta: default_eta(), tolerance: default_tolerance() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_trainers: usize,
    pub n_validators: usize,
    pub stop: StopCondition,
    pub data: DataSource,
    pub split: Split,
    pub learner: LearnerConfig,
    /// Local epochs over its shard per training job.
    #[serde(default = "one")]
    pub epochs_per_job: u64,
    /// Virtual duration of one SGD step at pace 1.
    #[serde(default = "one")]
    pub step_time: Ticks,
    pub sync: SyncPolicy,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub latency: LatencyModel,
    /// Base consensus step timeout.
    #[serde(default = "default_timeout")]
    pub consensus_timeout: Ticks,
    /// Per-trainer behavior; missing entries are honest at pace 1.
    #[serde(default)]
    pub trainers: Vec<NodeBehavior>,
    #[serde(default)]
    pub validators: Vec<NodeBehavior>,
    /// Hard cap on virtual time; reaching it before the stop condition is an error.
    #[serde(default = "default_cap")]
    pub max_virtual_time: VirtualTime,
}

fn one() -> u64 {
    1
}

fn default_timeout() -> Ticks {
    50
}

fn default_cap() -> VirtualTime {
    VirtualTime(1 << 40)
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn trainer_behavior(&self, i: usize) -> NodeBehavior {
        self.trainers.get(i).cloned().unwrap_or_default()
    }

    pub fn validator_behavior(&self, i: usize) -> NodeBehavior {
        self.validators.get(i).cloned().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_trainers == 0 || self.n_validators == 0 {
            return Err("need at least one trainer and one validator".into());
        }
        if self.trainers.len() > self.n_trainers {
            return Err(format!("{} trainer behaviors for {} trainers", self.trainers.len(), self.n_trainers));
        }
        if self.validators.len() > self.n_validators {
            return Err(format!(
                "{} validator behaviors for {} validators",
                self.validators.len(),
                self.n_validators
            ));
        }
        for (i, b) in self.trainers.iter().enumerate() {
            b.validate().map_err(|e| format!("trainer {i}: {e}"))?;
            if b.profile == Profile::Equivocator {
                return Err(format!("trainer {i}: equivocation applies to validators only"));
            }
        }
        for (i, b) in self.validators.iter().enumerate() {
            b.validate().map_err(|e| format!("validator {i}: {e}"))?;
            if !matches!(b.profile, Profile::Honest | Profile::Equivocator) {
                return Err(format!("validator {i}: only honest or equivocator profiles apply"));
            }
        }
        let faulty = self.validators.iter().filter(|b| b.profile == Profile::Equivocator).count();
        if 3 * faulty >= self.n_validators {
            return Err(format!("{faulty} equivocating validators out of {} breaks the fault bound", self.n_validators));
        }
        self.sync.validate().map_err(|e| e.to_string())?;
        self.learner.validate().map_err(|e| e.to_string())?;
        self.latency.validate()?;
        if self.split.test == 0 || self.split.trainer_shard == 0 || self.split.validator_shard == 0 {
            return Err("split sizes must be positive".into());
        }
        if !(self.scoring.eta.is_finite() && self.scoring.eta >= 0.0) {
            return Err("scoring eta must be finite and >= 0".into());
        }
        if !(self.scoring.tolerance.is_finite() && self.scoring.tolerance >= 0.0) {
            return Err("scoring tolerance must be finite and >= 0".into());
        }
        if self.consensus_timeout == 0 || self.step_time == 0 {
            return Err("consensus_timeout and step_time must be positive".into());
        }
        if let StopCondition::Rounds(0) = self.stop {
            return Err("stop after zero rounds".into());
        }
        Ok(())
    }
}
