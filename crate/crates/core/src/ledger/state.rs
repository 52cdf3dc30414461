use std::collections::BTreeMap;

use super::{Block, LedgerError, RoundAction, Transaction, TxKind};
use crate::aggregation::{aggregate, uniform_weights, AggregationInput};
use crate::codec::{Canonical, Encoder};
use crate::ids::TrainerId;
use crate::params::{Digest, GradientUpdate, ModelVersion};
use crate::reputation::TrustVector;
use crate::sync::RoundState;

/// State materialized from the committed chain.
#[derive(Clone, Debug, PartialEq)]
pub struct StateStore {
    /// Height of the last executed block.
    pub height: u64,
    pub current_model: ModelVersion,
    pub trust: TrustVector,
    pub pending_updates: BTreeMap<(u64, TrainerId), GradientUpdate>,
    pub round_state: RoundState,
    pub scoring: bool,
}

impl StateStore {
    /// Executes the height-0 block.
    pub fn from_genesis(block: &Block) -> Result<StateStore, LedgerError> {
        if block.height != 0 {
            return Err(LedgerError::HeightMismatch { expected: 0, actual: block.height });
        }
        let mut txs = block.txs.iter().enumerate();
        let spec = match txs.next() {
            Some((0, tx @ Transaction { kind: TxKind::Genesis(spec), .. })) => {
                if !tx.payload_ok() {
                    return Err(LedgerError::TxDigestMismatch { index: 0 });
                }
                spec
            }
            _ => return Err(LedgerError::MissingGenesis),
        };
        if spec.model.version != 0 || !spec.model.is_consistent() {
            return Err(LedgerError::InvalidTx { index: 0, reason: "genesis model must be a consistent version 0".into() });
        }
        let mut trainers = spec.trainers.clone();
        trainers.sort();
        trainers.dedup();
        if trainers.len() != spec.trainers.len() {
            return Err(LedgerError::InvalidTx { index: 0, reason: "duplicate trainer in genesis".into() });
        }
        let total = trainers.len() as u32;
        let mut state = StateStore {
            height: 0,
            current_model: spec.model.clone(),
            trust: TrustVector::init_uniform(trainers)?,
            pending_updates: BTreeMap::new(),
            // Placeholder closed round; genesis must open round 0.
            round_state: RoundState { closed: true, ..RoundState::open(0, Default::default(), None, total) },
            scoring: spec.scoring,
        };
        let mut opened = false;
        for (index, tx) in txs {
            match &tx.kind {
                TxKind::RoundControl { round: 0, action: RoundAction::Open { .. } } if !opened => {
                    state.apply_tx(index, tx, true)?;
                    opened = true;
                }
                _ => {
                    return Err(LedgerError::InvalidTx {
                        index,
                        reason: format!("{} not allowed in genesis", tx.kind.name()),
                    })
                }
            }
        }
        if !opened {
            return Err(LedgerError::InvalidTx { index: 0, reason: "genesis must open round 0".into() });
        }
        state.check_claimed_hash(block)?;
        Ok(state)
    }

    /// Canonical hash over height, model version and digest, raw trust
    /// scores, round state, pending update digests and the scoring flag.
    pub fn state_hash(&self) -> Digest {
        let mut enc = Encoder::new();
        enc.u64(self.height).u64(self.current_model.version);
        self.current_model.digest.encode(&mut enc);
        enc.len(self.trust.len());
        for (t, r) in self.trust.raw_scores() {
            enc.u32(t.0).f64(*r);
        }
        self.round_state.encode(&mut enc);
        enc.len(self.pending_updates.len());
        for ((round, t), u) in &self.pending_updates {
            enc.u64(*round).u32(t.0);
            u.digest().encode(&mut enc);
        }
        enc.bool(self.scoring);
        Digest::of(enc.as_slice())
    }

    fn check_claimed_hash(&self, block: &Block) -> Result<(), LedgerError> {
        let computed = self.state_hash();
        if computed != block.state_hash {
            return Err(LedgerError::StateHashMismatch { claimed: block.state_hash, computed });
        }
        Ok(())
    }

    /// The applied weights a release must carry for `trainers`.
    pub fn release_weights(&self, trainers: &[TrainerId]) -> Result<Vec<f64>, LedgerError> {
        if self.scoring {
            Ok(self.trust.weights_for_round(trainers)?)
        } else {
            Ok(uniform_weights(trainers.len())?)
        }
    }

    /// Aggregates this round's pending updates for `applied` into the next model.
    pub fn aggregate_release(&self, applied: &[(TrainerId, f64)]) -> Result<ModelVersion, LedgerError> {
        let round = self.round_state.round_id;
        let updates = applied
            .iter()
            .map(|(t, w)| {
                self.pending_updates
                    .get(&(round, *t))
                    .map(|u| (u.clone(), *w))
                    .ok_or_else(|| LedgerError::InvalidTx { index: 0, reason: format!("no pending update from {t}") })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let params = aggregate(&AggregationInput::all_accepted(self.current_model.params.clone(), updates))?;
        Ok(ModelVersion::new(self.current_model.version + 1, params))
    }

    /// State after applying `txs` on top of this one, without height or
    /// state-hash bookkeeping. Used to assemble blocks.
    pub fn preview(&self, txs: &[Transaction]) -> Result<StateStore, LedgerError> {
        let mut next = self.clone();
        for (index, tx) in txs.iter().enumerate() {
            next.apply_tx(index, tx, false)?;
        }
        Ok(next)
    }

    fn apply_tx(&mut self, index: usize, tx: &Transaction, genesis: bool) -> Result<(), LedgerError> {
        if !tx.payload_ok() {
            return Err(LedgerError::TxDigestMismatch { index });
        }
        let invalid = |reason: String| LedgerError::InvalidTx { index, reason };
        let rs = &mut self.round_state;
        match &tx.kind {
            TxKind::Genesis(_) => return Err(LedgerError::MisplacedGenesis),
            TxKind::ShareGradient { round, update } => {
                if *round != rs.round_id || rs.closed {
                    return Err(invalid(format!("round {round} is not open")));
                }
                if update.base_version != self.current_model.version {
                    return Err(LedgerError::StaleUpdate {
                        trainer: update.trainer_id,
                        update_version: update.base_version,
                        current_version: self.current_model.version,
                    });
                }
                if update.dim() != self.current_model.params.dim() {
                    return Err(invalid(format!("update dimension {} != model dimension", update.dim())));
                }
                if self.trust.raw(update.trainer_id).is_none() {
                    return Err(invalid(format!("unknown trainer {}", update.trainer_id)));
                }
                if self.pending_updates.insert((*round, update.trainer_id), update.clone()).is_some() {
                    return Err(invalid(format!("second update from {} in round {round}", update.trainer_id)));
                }
                rs.submitted.insert(update.trainer_id);
            }
            TxKind::TrustAdjust { trainer, new_raw } => {
                if !self.scoring {
                    return Err(invalid("trust adjustment while scoring is disabled".into()));
                }
                self.trust.set_raw(*trainer, *new_raw)?;
            }
            TxKind::ReleaseModel { model, applied } => {
                if !rs.closed {
                    return Err(invalid("release before round close".into()));
                }
                let ids: Vec<TrainerId> = applied.iter().map(|(t, _)| *t).collect();
                let pending: Vec<TrainerId> = self
                    .pending_updates
                    .keys()
                    .filter(|(r, _)| *r == rs.round_id)
                    .map(|(_, t)| *t)
                    .collect();
                if ids.is_empty() || ids != pending {
                    return Err(invalid("applied set differs from the round's shared updates".into()));
                }
                let expected = self.release_weights(&ids)?;
                if applied.iter().zip(&expected).any(|((_, w), e)| w.to_bits() != e.to_bits()) {
                    return Err(invalid("applied weights differ from trust weights".into()));
                }
                let next = self.aggregate_release(applied)?;
                if model.version != next.version || model.digest != next.digest || !model.is_consistent() {
                    return Err(invalid(format!("released model v{} does not match aggregation", model.version)));
                }
                self.current_model = next;
                let round = self.round_state.round_id;
                self.pending_updates.retain(|(r, _), _| *r != round);
            }
            TxKind::RoundControl { round, action } => match action {
                RoundAction::Open { at, deadline } => {
                    let expected = if genesis { 0 } else { rs.round_id + 1 };
                    if *round != expected || !rs.closed {
                        return Err(invalid(format!("cannot open round {round}")));
                    }
                    let total = rs.total_trainers;
                    *rs = RoundState::open(*round, *at, *deadline, total);
                    self.pending_updates.clear();
                }
                RoundAction::Extend { by } => {
                    if *round != rs.round_id {
                        return Err(invalid(format!("cannot extend round {round}")));
                    }
                    rs.extend(*by)?;
                }
                RoundAction::Close => {
                    if *round != rs.round_id || rs.closed {
                        return Err(invalid(format!("cannot close round {round}")));
                    }
                    rs.closed = true;
                }
            },
        }
        Ok(())
    }
}

/// Applies every transaction of `block` in order and checks the claimed state hash.
pub fn execute_block(state: &StateStore, block: &Block) -> Result<StateStore, LedgerError> {
    if block.height != state.height + 1 {
        return Err(LedgerError::HeightMismatch { expected: state.height + 1, actual: block.height });
    }
    let mut next = state.clone();
    next.height = block.height;
    for (index, tx) in block.txs.iter().enumerate() {
        next.apply_tx(index, tx, false)?;
    }
    next.check_claimed_hash(block)?;
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKey {
    LatestVersion,
    Trust,
    Round,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QueryValue {
    LatestVersion(u64),
    Trust(Vec<(TrainerId, f64)>),
    Round(RoundState),
}

pub fn query(state: &StateStore, key: QueryKey) -> QueryValue {
    match key {
        QueryKey::LatestVersion => QueryValue::LatestVersion(state.current_model.version),
        QueryKey::Trust => QueryValue::Trust(state.trust.phi_vector()),
        QueryKey::Round => QueryValue::Round(state.round_state.clone()),
    }
}
