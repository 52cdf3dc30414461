//! Per-update quality gate.
//!
//! A validator applies the update to the released model it was computed
//! against and compares accuracy on its own held-out data. The update is
//! accepted when accuracy does not fall by more than the tolerance.

use thiserror::Error;

use crate::learner::{evaluate, Dataset, LearnerError, ModelSpec};
use crate::params::{GradientUpdate, ModelVersion, ParamsError};
use crate::reputation::ValidationReport;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("stale update: based on version {update_version}, current version is {current_version}")]
    Stale { update_version: u64, current_version: u64 },
    #[error("update dimension {actual} does not match model dimension {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("invalid validator config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

#[derive(Clone, Debug)]
pub struct ValidatorConfig {
    pub dataset: Dataset,
    /// Largest tolerated accuracy drop.
    pub tolerance: f64,
}

impl ValidatorConfig {
    pub fn new(dataset: Dataset, tolerance: f64) -> Result<Self, ValidationError> {
        if !(tolerance.is_finite() && tolerance >= 0.0) {
            return Err(ValidationError::InvalidConfig(format!("tolerance {tolerance} must be >= 0")));
        }
        if dataset.is_empty() {
            return Err(ValidationError::InvalidConfig("validation dataset is empty".into()));
        }
        Ok(Self { dataset, tolerance })
    }
}

/// Scores `update` against `base`, which must be the version it was computed on.
pub fn validate_update(
    spec: &ModelSpec,
    base: &ModelVersion,
    update: &GradientUpdate,
    cfg: &ValidatorConfig,
    round: u64,
) -> Result<ValidationReport, ValidationError> {
    let before = evaluate(spec, &base.params, &cfg.dataset)?;
    score(spec, base, update, cfg, round, before)
}

fn score(
    spec: &ModelSpec,
    base: &ModelVersion,
    update: &GradientUpdate,
    cfg: &ValidatorConfig,
    round: u64,
    metric_before: f64,
) -> Result<ValidationReport, ValidationError> {
    if update.base_version != base.version {
        return Err(ValidationError::Stale {
            update_version: update.base_version,
            current_version: base.version,
        });
    }
    if update.dim() != base.params.dim() {
        return Err(ValidationError::DimMismatch { expected: base.params.dim(), actual: update.dim() });
    }
    let candidate = base.params.add(update.delta())?;
    let metric_after = evaluate(spec, &candidate, &cfg.dataset)?;
    Ok(ValidationReport {
        trainer_id: update.trainer_id,
        round,
        metric_before,
        metric_after,
        accepted: metric_after >= metric_before - cfg.tolerance,
    })
}

/// A validator's scoring state; caches the base-model accuracy per version.
#[derive(Clone, Debug)]
pub struct UpdateValidator {
    pub spec: ModelSpec,
    pub config: ValidatorConfig,
    base_metric: Option<(u64, f64)>,
}

impl UpdateValidator {
    pub fn new(spec: ModelSpec, config: ValidatorConfig) -> Self {
        Self { spec, config, base_metric: None }
    }

    pub fn validate(
        &mut self,
        base: &ModelVersion,
        update: &GradientUpdate,
        round: u64,
    ) -> Result<ValidationReport, ValidationError> {
        let before = match self.base_metric {
            Some((v, m)) if v == base.version => m,
            _ => {
                let m = evaluate(&self.spec, &base.params, &self.config.dataset)?;
                self.base_metric = Some((base.version, m));
                m
            }
        };
        score(&self.spec, base, update, &self.config, round, before)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::TrainerId;
    use crate::learner::{generate_synthetic, ModelArch};
    use crate::params::FlatParams;

    fn toy() -> (ModelSpec, ModelVersion, ValidatorConfig) {
        // x = -1 -> class 0, x = +1 -> class 1; base weights classify both correctly.
        let data = Dataset::new(vec![-1.0, 1.0], vec![0, 1], 1, 2).unwrap();
        let spec = ModelSpec::for_dataset(ModelArch::SoftmaxRegression, &data);
        let base = ModelVersion::new(3, FlatParams::new(vec![-1.0, 1.0, 0.0, 0.0]).unwrap());
        (spec, base, ValidatorConfig::new(data, 0.0).unwrap())
    }

    #[test]
    fn zero_delta_is_accepted_at_zero_tolerance() {
        let (spec, base, cfg) = toy();
        let u = GradientUpdate::new(TrainerId(0), 3, vec![0.0; 4], 1).unwrap();
        let r = validate_update(&spec, &base, &u, &cfg, 0).unwrap();
        assert_eq!(r.metric_before, 1.0);
        assert_eq!(r.metric_after, r.metric_before);
        assert!(r.accepted);
    }

    #[test]
    fn prediction_flipping_delta_is_rejected() {
        let (spec, base, cfg) = toy();
        let u = GradientUpdate::new(TrainerId(0), 3, vec![2.0, -2.0, 0.0, 0.0], 1).unwrap();
        let r = validate_update(&spec, &base, &u, &cfg, 0).unwrap();
        assert_eq!(r.metric_after, 0.0);
        assert!(!r.accepted);
        let lenient = ValidatorConfig { tolerance: 1.0, ..cfg };
        assert!(validate_update(&spec, &base, &u, &lenient, 0).unwrap().accepted);
    }

    #[test]
    fn stale_and_mismatched_updates() {
        let (spec, base, cfg) = toy();
        let stale = GradientUpdate::new(TrainerId(0), 2, vec![0.0; 4], 1).unwrap();
        assert!(matches!(
            validate_update(&spec, &base, &stale, &cfg, 0),
            Err(ValidationError::Stale { update_version: 2, current_version: 3 })
        ));
        let short = GradientUpdate::new(TrainerId(0), 3, vec![0.0; 3], 1).unwrap();
        assert!(matches!(
            validate_update(&spec, &base, &short, &cfg, 0),
            Err(ValidationError::DimMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn cached_validator_matches_free_function() {
        let data = generate_synthetic(2, 60, 3, 3).unwrap();
        let spec = ModelSpec::for_dataset(ModelArch::SoftmaxRegression, &data);
        let base = ModelVersion::new(0, spec.init(0));
        let cfg = ValidatorConfig::new(data, 0.05).unwrap();
        let mut v = UpdateValidator::new(spec, cfg.clone());
        for t in 0..3 {
            let delta: Vec<f64> = (0..spec.dim()).map(|i| ((i + t) as f64).sin() * 0.3).collect();
            let u = GradientUpdate::new(TrainerId(t as u32), 0, delta, 1).unwrap();
            let a = v.validate(&base, &u, 1).unwrap();
            let b = validate_update(&spec, &base, &u, &cfg, 1).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tolerance_must_be_non_negative() {
        let (_, _, cfg) = toy();
        assert!(ValidatorConfig::new(cfg.dataset, -0.1).is_err());
    }
}
