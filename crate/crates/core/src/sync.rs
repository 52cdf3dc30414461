//! Round lifecycle under the BSP, SSP and BAP synchronization schemes.
//!
//! - BSP: a round lasts exactly one period; updates after the deadline are dropped.
//! - SSP: as BSP, but at the deadline a single extension of
//!   `period * unfinished / total` is granted when some trainers have not
//!   submitted. Trainers that had finished may train up to N more steps
//!   during the extension and revise their submission.
//! - BAP: no deadline; the round closes once the fraction of trainers that
//!   submitted reaches the majority ratio. Trainers keep training and
//!   resubmitting until the release, and the latest submission wins.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::ids::TrainerId;
use crate::time::{Ticks, VirtualTime};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("round {0} is closed")]
    RoundClosed(u64),
    #[error("trainer {trainer} already submitted in round {round}")]
    DuplicateSubmission { trainer: TrainerId, round: u64 },
    #[error("extra steps are only defined for SSP, not {0}")]
    NotSsp(Scheme),
    #[error("invalid sync policy: {0}")]
    InvalidPolicy(String),
    #[error("round {0} already had its extension")]
    AlreadyExtended(u64),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scheme {
    Bsp,
    Ssp,
    Bap,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Bsp => "BSP",
            Scheme::Ssp => "SSP",
            Scheme::Bap => "BAP",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncPolicy {
    pub scheme: Scheme,
    /// Round period for BSP/SSP, in ticks.
    #[serde(default)]
    pub period: Ticks,
    /// SSP: extra local steps allowed during an extension.
    #[serde(default)]
    pub max_extension_steps: u64,
    /// BAP: fraction of trainers that must submit before release.
    #[serde(default = "default_majority")]
    pub majority_ratio: f64,
}

fn default_majority() -> f64 {
    1.0
}

impl SyncPolicy {
    pub fn bsp(period: Ticks) -> Self {
        Self { scheme: Scheme::Bsp, period, max_extension_steps: 0, majority_ratio: 1.0 }
    }

    pub fn ssp(period: Ticks, max_extension_steps: u64) -> Self {
        Self { scheme: Scheme::Ssp, period, max_extension_steps, majority_ratio: 1.0 }
    }

    pub fn bap(majority_ratio: f64) -> Self {
        Self { scheme: Scheme::Bap, period: 0, max_extension_steps: 0, majority_ratio }
    }

    pub fn validate(&self) -> Result<(), SyncError> {
        match self.scheme {
            Scheme::Bsp | Scheme::Ssp if self.period == 0 => {
                Err(SyncError::InvalidPolicy(format!("{} needs a positive period", self.scheme)))
            }
            Scheme::Bap if !(self.majority_ratio > 0.0 && self.majority_ratio <= 1.0) => Err(
                SyncError::InvalidPolicy(format!("majority ratio {} not in (0, 1]", self.majority_ratio)),
            ),
            _ => Ok(()),
        }
    }

    /// Fraction of trainers allowed to be missing at release under BAP.
    pub fn slack_ratio_threshold(&self) -> f64 {
        1.0 - self.majority_ratio
    }

    /// Short label such as `BSP` or `BAP_0.6`.
    pub fn label(&self) -> String {
        match self.scheme {
            Scheme::Bap => format!("BAP_{}", self.majority_ratio),
            s => s.to_string(),
        }
    }

    /// Deadline of a round opened at `at`; BAP rounds have none.
    pub fn deadline_from(&self, at: VirtualTime) -> Option<VirtualTime> {
        match self.scheme {
            Scheme::Bsp | Scheme::Ssp => Some(at + self.period),
            Scheme::Bap => None,
        }
    }
}

/// Per-round barrier bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundState {
    pub round_id: u64,
    pub opened_at: VirtualTime,
    pub deadline: Option<VirtualTime>,
    pub extension_granted: bool,
    pub submitted: BTreeSet<TrainerId>,
    pub total_trainers: u32,
    pub closed: bool,
}

impl RoundState {
    pub fn open(round_id: u64, opened_at: VirtualTime, deadline: Option<VirtualTime>, total_trainers: u32) -> Self {
        Self {
            round_id,
            opened_at,
            deadline,
            extension_granted: false,
            submitted: BTreeSet::new(),
            total_trainers,
            closed: false,
        }
    }

    pub fn submitted_ratio(&self) -> f64 {
        if self.total_trainers == 0 {
            return 1.0;
        }
        self.submitted.len() as f64 / self.total_trainers as f64
    }

    pub fn extend(&mut self, by: Ticks) -> Result<(), SyncError> {
        if self.closed {
            return Err(SyncError::RoundClosed(self.round_id));
        }
        if self.extension_granted {
            return Err(SyncError::AlreadyExtended(self.round_id));
        }
        self.extension_granted = true;
        self.deadline = self.deadline.map(|d| d + by);
        Ok(())
    }

    pub fn in_extension(&self) -> bool {
        self.extension_granted && !self.closed
    }
}

impl Canonical for RoundState {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.round_id).u64(self.opened_at.0);
        match self.deadline {
            Some(d) => enc.u8(1).u64(d.0),
            None => enc.u8(0),
        };
        enc.bool(self.extension_granted).len(self.submitted.len());
        for t in &self.submitted {
            enc.u32(t.0);
        }
        enc.u32(self.total_trainers).bool(self.closed);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let round_id = dec.u64()?;
        let opened_at = VirtualTime(dec.u64()?);
        let deadline = match dec.u8()? {
            0 => None,
            1 => Some(VirtualTime(dec.u64()?)),
            tag => return Err(dec.tag_error("deadline", tag)),
        };
        let extension_granted = dec.bool()?;
        let n = dec.seq_len()?;
        let submitted = (0..n).map(|_| dec.u32().map(TrainerId)).collect::<Result<_, _>>()?;
        let total_trainers = dec.u32()?;
        let closed = dec.bool()?;
        Ok(Self { round_id, opened_at, deadline, extension_granted, submitted, total_trainers, closed })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloseDecision {
    KeepOpen,
    Extend { by: Ticks },
    Close,
}

pub fn should_close(policy: &SyncPolicy, rs: &RoundState, now: VirtualTime) -> CloseDecision {
    if rs.closed {
        return CloseDecision::Close;
    }
    let past_deadline = rs.deadline.is_some_and(|d| now >= d);
    match policy.scheme {
        Scheme::Bsp if past_deadline => CloseDecision::Close,
        Scheme::Ssp if past_deadline => {
            let unfinished = (rs.total_trainers as usize).saturating_sub(rs.submitted.len()) as u64;
            let by = if rs.total_trainers == 0 {
                0
            } else {
                policy.period * unfinished / rs.total_trainers as u64
            };
            if !rs.extension_granted && by > 0 {
                CloseDecision::Extend { by }
            } else {
                CloseDecision::Close
            }
        }
        Scheme::Bap if rs.submitted.len() as f64 >= policy.majority_ratio * rs.total_trainers as f64 - 1e-9 => {
            CloseDecision::Close
        }
        _ => CloseDecision::KeepOpen,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubmissionOutcome {
    /// First submission from this trainer in the round.
    Recorded,
    /// Replaces the trainer's earlier submission.
    Superseded,
}

/// Records a submission. BSP keeps only the first one per trainer; BAP keeps
/// the latest; SSP keeps the first, except that a trainer may revise once the
/// round is in its extension.
pub fn on_submission(
    policy: &SyncPolicy,
    rs: &mut RoundState,
    trainer: TrainerId,
) -> Result<SubmissionOutcome, SyncError> {
    if rs.closed {
        return Err(SyncError::RoundClosed(rs.round_id));
    }
    if rs.submitted.insert(trainer) {
        return Ok(SubmissionOutcome::Recorded);
    }
    match policy.scheme {
        Scheme::Bap => Ok(SubmissionOutcome::Superseded),
        Scheme::Ssp if rs.in_extension() => Ok(SubmissionOutcome::Superseded),
        _ => Err(SyncError::DuplicateSubmission { trainer, round: rs.round_id }),
    }
}

pub fn extra_steps_allowed(policy: &SyncPolicy, trainer_finished: bool, in_extension: bool) -> Result<u64, SyncError> {
    if policy.scheme != Scheme::Ssp {
        return Err(SyncError::NotSsp(policy.scheme));
    }
    Ok(if trainer_finished && in_extension { policy.max_extension_steps } else { 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round(policy: &SyncPolicy, submitted: u32, total: u32) -> RoundState {
        let mut rs = RoundState::open(0, VirtualTime(0), policy.deadline_from(VirtualTime(0)), total);
        rs.submitted = (0..submitted).map(TrainerId).collect();
        rs
    }

    #[test]
    fn bsp_closes_at_deadline() {
        let p = SyncPolicy::bsp(60);
        let rs = round(&p, 4, 6);
        assert_eq!(should_close(&p, &rs, VirtualTime(59)), CloseDecision::KeepOpen);
        assert_eq!(should_close(&p, &rs, VirtualTime(60)), CloseDecision::Close);
        let all = round(&p, 6, 6);
        assert_eq!(should_close(&p, &all, VirtualTime(10)), CloseDecision::KeepOpen);
    }

    #[test]
    fn ssp_extends_once_in_proportion_to_unfinished() {
        let p = SyncPolicy::ssp(60, 5);
        let mut rs = round(&p, 4, 6);
        assert_eq!(should_close(&p, &rs, VirtualTime(60)), CloseDecision::Extend { by: 20 });
        rs.extend(20).unwrap();
        assert_eq!(rs.deadline, Some(VirtualTime(80)));
        assert_eq!(should_close(&p, &rs, VirtualTime(79)), CloseDecision::KeepOpen);
        assert_eq!(should_close(&p, &rs, VirtualTime(80)), CloseDecision::Close);
        assert_eq!(rs.extend(5), Err(SyncError::AlreadyExtended(0)));
        let done = round(&p, 6, 6);
        assert_eq!(should_close(&p, &done, VirtualTime(60)), CloseDecision::Close);
    }

    #[test]
    fn bap_closes_on_majority() {
        let p = SyncPolicy::bap(0.6);
        assert_eq!(should_close(&p, &round(&p, 3, 6), VirtualTime(1_000_000)), CloseDecision::KeepOpen);
        assert_eq!(should_close(&p, &round(&p, 4, 6), VirtualTime(0)), CloseDecision::Close);
        let full = SyncPolicy::bap(1.0);
        assert_eq!(should_close(&full, &round(&full, 5, 6), VirtualTime(0)), CloseDecision::KeepOpen);
        assert_eq!(should_close(&full, &round(&full, 6, 6), VirtualTime(0)), CloseDecision::Close);
    }

    #[test]
    fn submission_rules_per_scheme() {
        let bsp = SyncPolicy::bsp(10);
        let mut rs = round(&bsp, 0, 6);
        assert_eq!(on_submission(&bsp, &mut rs, TrainerId(3)), Ok(SubmissionOutcome::Recorded));
        assert!(rs.submitted.contains(&TrainerId(3)));
        assert_eq!(
            on_submission(&bsp, &mut rs, TrainerId(3)),
            Err(SyncError::DuplicateSubmission { trainer: TrainerId(3), round: 0 })
        );

        let bap = SyncPolicy::bap(1.0);
        let mut rs = round(&bap, 0, 6);
        on_submission(&bap, &mut rs, TrainerId(3)).unwrap();
        assert_eq!(on_submission(&bap, &mut rs, TrainerId(3)), Ok(SubmissionOutcome::Superseded));
        assert_eq!(rs.submitted.len(), 1);

        let ssp = SyncPolicy::ssp(10, 2);
        let mut rs = round(&ssp, 0, 6);
        on_submission(&ssp, &mut rs, TrainerId(1)).unwrap();
        assert!(on_submission(&ssp, &mut rs, TrainerId(1)).is_err());
        rs.extend(3).unwrap();
        assert_eq!(on_submission(&ssp, &mut rs, TrainerId(1)), Ok(SubmissionOutcome::Superseded));

        rs.closed = true;
        assert_eq!(on_submission(&ssp, &mut rs, TrainerId(2)), Err(SyncError::RoundClosed(0)));
    }

    #[test]
    fn extra_steps() {
        let p = SyncPolicy::ssp(60, 5);
        assert_eq!(extra_steps_allowed(&p, true, true), Ok(5));
        assert_eq!(extra_steps_allowed(&p, false, true), Ok(0));
        assert_eq!(extra_steps_allowed(&p, true, false), Ok(0));
        assert_eq!(extra_steps_allowed(&SyncPolicy::bsp(1), true, true), Err(SyncError::NotSsp(Scheme::Bsp)));
    }

    #[test]
    fn policy_validation_and_labels() {
        assert!(SyncPolicy::bsp(0).validate().is_err());
        assert!(SyncPolicy::bap(0.0).validate().is_err());
        assert!(SyncPolicy::bap(1.0).validate().is_ok());
        assert_eq!(SyncPolicy::bap(0.6).label(), "BAP_0.6");
        assert_eq!(SyncPolicy::bap(1.0).label(), "BAP_1");
        assert!((SyncPolicy::bap(0.6).slack_ratio_threshold() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn round_state_encoding_round_trips() {
        let p = SyncPolicy::ssp(60, 1);
        let mut rs = round(&p, 3, 6);
        rs.extend(7).unwrap();
        assert_eq!(RoundState::from_bytes(&rs.to_bytes()).unwrap(), rs);
    }
}
