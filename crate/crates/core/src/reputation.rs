//! Reward-penalty trust scores.
//!
//! Each trainer holds a non-negative raw score; its trust `phi` is the raw
//! score over the sum of all raw scores, so trust values lie in `[0, 1]` and
//! sum to one. A validation report moves the raw score additively by
//! `eta * (metric_after - metric_before)` and clamps at zero. A trainer whose
//! raw score has reached zero is dismissed: later reports leave it at zero.
//! If every raw score is zero, trust falls back to uniform.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ids::TrainerId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReputationError {
    #[error("trust vector needs at least one trainer")]
    NoTrainers,
    #[error("unknown trainer {0}")]
    UnknownTrainer(TrainerId),
    #[error("no accepted trainers to weight")]
    EmptyAcceptedSet,
    #[error("raw score {0} is not a finite non-negative real")]
    InvalidScore(f64),
    #[error("eta {0} must be a positive finite real")]
    InvalidEta(f64),
}

/// Outcome of validating one trainer update.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub trainer_id: TrainerId,
    pub round: u64,
    pub metric_before: f64,
    pub metric_after: f64,
    pub accepted: bool,
}

impl ValidationReport {
    pub fn improvement(&self) -> f64 {
        self.metric_after - self.metric_before
    }

    /// Averages metrics from several validators for the same update and
    /// re-derives acceptance with `tolerance`.
    pub fn average(reports: &[ValidationReport], tolerance: f64) -> Option<ValidationReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let metric_before = reports.iter().map(|r| r.metric_before).sum::<f64>() / n;
        let metric_after = reports.iter().map(|r| r.metric_after).sum::<f64>() / n;
        Some(ValidationReport {
            trainer_id: first.trainer_id,
            round: first.round,
            metric_before,
            metric_after,
            accepted: metric_after >= metric_before - tolerance,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrustVector {
    raw: BTreeMap<TrainerId, f64>,
}

impl TrustVector {
    /// Every trainer at raw score 1.
    pub fn init_uniform(trainers: impl IntoIterator<Item = TrainerId>) -> Result<Self, ReputationError> {
        let raw: BTreeMap<_, _> = trainers.into_iter().map(|t| (t, 1.0)).collect();
        if raw.is_empty() {
            return Err(ReputationError::NoTrainers);
        }
        Ok(Self { raw })
    }

    pub fn from_raw(raw: BTreeMap<TrainerId, f64>) -> Result<Self, ReputationError> {
        if raw.is_empty() {
            return Err(ReputationError::NoTrainers);
        }
        if let Some(&bad) = raw.values().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(ReputationError::InvalidScore(bad));
        }
        Ok(Self { raw })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn trainers(&self) -> impl Iterator<Item = TrainerId> + '_ {
        self.raw.keys().copied()
    }

    pub fn raw(&self, id: TrainerId) -> Option<f64> {
        self.raw.get(&id).copied()
    }

    pub fn raw_scores(&self) -> &BTreeMap<TrainerId, f64> {
        &self.raw
    }

    fn total(&self) -> f64 {
        self.raw.values().sum()
    }

    pub fn phi(&self, id: TrainerId) -> Option<f64> {
        let raw = self.raw(id)?;
        let total = self.total();
        Some(if total > 0.0 { raw / total } else { 1.0 / self.len() as f64 })
    }

    /// Trust of every trainer in ascending id order.
    pub fn phi_vector(&self) -> Vec<(TrainerId, f64)> {
        let total = self.total();
        let uniform = 1.0 / self.len() as f64;
        self.raw
            .iter()
            .map(|(&t, &r)| (t, if total > 0.0 { r / total } else { uniform }))
            .collect()
    }

    pub fn set_raw(&mut self, id: TrainerId, value: f64) -> Result<(), ReputationError> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(ReputationError::InvalidScore(value));
        }
        match self.raw.get_mut(&id) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(ReputationError::UnknownTrainer(id)),
        }
    }

    /// The raw score `report` would produce, without applying it.
    pub fn updated_raw(&self, report: &ValidationReport, eta: f64) -> Result<f64, ReputationError> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(ReputationError::InvalidEta(eta));
        }
        let raw = self.raw(report.trainer_id).ok_or(ReputationError::UnknownTrainer(report.trainer_id))?;
        if raw == 0.0 {
            return Ok(0.0);
        }
        Ok((raw + eta * report.improvement()).max(0.0))
    }

    pub fn apply_report(&self, report: &ValidationReport, eta: f64) -> Result<TrustVector, ReputationError> {
        let value = self.updated_raw(report, eta)?;
        let mut next = self.clone();
        next.set_raw(report.trainer_id, value)?;
        Ok(next)
    }

    /// Trust restricted to `accepted` and renormalized, in the given order;
    /// uniform when every restricted score is zero.
    pub fn weights_for_round(&self, accepted: &[TrainerId]) -> Result<Vec<f64>, ReputationError> {
        if accepted.is_empty() {
            return Err(ReputationError::EmptyAcceptedSet);
        }
        let phis = accepted
            .iter()
            .map(|&t| self.phi(t).ok_or(ReputationError::UnknownTrainer(t)))
            .collect::<Result<Vec<_>, _>>()?;
        let total: f64 = phis.iter().sum();
        if total > 0.0 {
            Ok(phis.into_iter().map(|p| p / total).collect())
        } else {
            Ok(vec![1.0 / accepted.len() as f64; accepted.len()])
        }
    }
}
