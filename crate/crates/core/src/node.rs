//! Trainer and validator state machines. Each handler consumes one event and
//! returns the messages and timers it produces; the simulator delivers them.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::consensus::{
    ConsensusApp, ConsensusError, ConsensusValue, Engine, EngineConfig, KeyRing, Message, Output, TimeoutConfig,
    Timeout, Vote,
};
use crate::ids::{NodeId, TrainerId, ValidatorId};
use crate::learner::{compute_gradient_steps, Dataset, Learner, LearnerError};
use crate::ledger::{Block, Chain, LedgerError, RoundAction, Transaction, TxKind};
use crate::netsim::{apply_noise, NodeBehavior, Profile};
use crate::params::{Digest, GradientUpdate, ModelVersion, ParamsError};
use crate::reputation::{ReputationError, ValidationReport};
use crate::rng::{stream, stream_rng};
use crate::sync::{extra_steps_allowed, on_submission, should_close, CloseDecision, RoundState, Scheme, SyncPolicy};
use crate::time::{Ticks, VirtualTime};
use crate::validation::{UpdateValidator, ValidationError};

impl ConsensusValue for Block {}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Reputation(#[from] ReputationError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Msg {
    /// Trainer to its validator.
    Submit { round: u64, update: GradientUpdate },
    /// Validator to trainer: `round` is open on `model`.
    RoundOpened { round: u64, model: ModelVersion },
    /// Validator to trainer: the round's deadline was extended.
    RoundExtended { round: u64 },
    /// Between validators: an update the sender accepted, with its verdict.
    Share { round: u64, update: GradientUpdate, report: ValidationReport },
    /// Between validators: a verdict on the update with digest `update`.
    Report { round: u64, update: Digest, report: ValidationReport },
    Consensus(Message<Block>),
}

impl Msg {
    pub fn round(&self) -> Option<u64> {
        match self {
            Msg::Submit { round, .. }
            | Msg::RoundOpened { round, .. }
            | Msg::RoundExtended { round }
            | Msg::Share { round, .. }
            | Msg::Report { round, .. } => Some(*round),
            Msg::Consensus(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeTimer {
    JobDone { job: u64 },
    Consensus(Timeout),
    Deadline { round: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outbound {
    Send { to: NodeId, msg: Msg },
    Timer { after: Ticks, timer: NodeTimer },
}

#[derive(Clone, Debug)]
struct Job {
    id: u64,
    steps: u64,
    extra: bool,
}

/// A trainer: trains on its shard from each released model and submits
/// deltas to its assigned validator.
#[derive(Clone, Debug)]
pub struct TrainerNode {
    pub id: TrainerId,
    pub assigned_validator: ValidatorId,
    pub behavior: NodeBehavior,
    shard: Dataset,
    learner: Learner,
    policy: SyncPolicy,
    job_steps: u64,
    step_time: Ticks,
    seed: u64,
    round: Option<u64>,
    base: Option<ModelVersion>,
    cumulative: Vec<f64>,
    steps_done: u64,
    passes: u64,
    submitted: bool,
    job: Option<Job>,
    next_job: u64,
    pub submissions: u64,
    pub skipped_rounds: u64,
}

impl TrainerNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: TrainerId,
        assigned_validator: ValidatorId,
        behavior: NodeBehavior,
        shard: Dataset,
        learner: Learner,
        policy: SyncPolicy,
        job_steps: u64,
        step_time: Ticks,
        seed: u64,
    ) -> Self {
        Self {
            id,
            assigned_validator,
            behavior,
            shard,
            learner,
            policy,
            job_steps,
            step_time,
            seed,
            round: None,
            base: None,
            cumulative: Vec::new(),
            steps_done: 0,
            passes: 0,
            submitted: false,
            job: None,
            next_job: 0,
            submissions: 0,
            skipped_rounds: 0,
        }
    }

    pub fn local_version(&self) -> Option<u64> {
        self.base.as_ref().map(|m| m.version)
    }

    pub fn training(&self) -> bool {
        self.job.is_some()
    }

    pub fn shard(&self) -> &Dataset {
        &self.shard
    }

    /// Virtual duration of `steps` SGD steps at this trainer's pace.
    pub fn job_duration(&self, steps: u64) -> Ticks {
        (steps as f64 * self.step_time as f64 * self.behavior.pace).ceil() as Ticks
    }

    pub fn handle(&mut self, from: NodeId, msg: Msg) -> Result<Vec<Outbound>, NodeError> {
        if from != NodeId::Validator(self.assigned_validator) {
            return Ok(Vec::new());
        }
        match msg {
            Msg::RoundOpened { round, model } => Ok(self.on_round_opened(round, model)),
            Msg::RoundExtended { round } => Ok(self.on_round_extended(round)),
            _ => Ok(Vec::new()),
        }
    }

    pub fn on_round_opened(&mut self, round: u64, model: ModelVersion) -> Vec<Outbound> {
        if self.round.is_some_and(|r| r >= round) {
            return Vec::new();
        }
        self.round = Some(round);
        self.cumulative = vec![0.0; model.params.dim()];
        self.base = Some(model);
        self.steps_done = 0;
        self.passes = 0;
        self.submitted = false;
        self.job = None;
        if let Profile::Lazy { skip_prob } = self.behavior.profile {
            let roll: f64 = stream_rng(self.seed, &[stream::BEHAVIOR, self.id.0 as u64, round]).random();
            if roll < skip_prob {
                self.skipped_rounds += 1;
                return Vec::new();
            }
        }
        vec![self.start_job(self.job_steps, false)]
    }

    pub fn on_round_extended(&mut self, round: u64) -> Vec<Outbound> {
        if self.round != Some(round) || self.policy.scheme != Scheme::Ssp || self.job.is_some() {
            return Vec::new();
        }
        let extra = extra_steps_allowed(&self.policy, self.submitted, true).unwrap_or(0);
        if extra == 0 {
            return Vec::new();
        }
        vec![self.start_job(extra, true)]
    }

    fn start_job(&mut self, steps: u64, extra: bool) -> Outbound {
        let id = self.next_job;
        self.next_job += 1;
        self.job = Some(Job { id, steps, extra });
        Outbound::Timer { after: self.job_duration(steps), timer: NodeTimer::JobDone { job: id } }
    }

    pub fn on_job_done(&mut self, job: u64) -> Result<Vec<Outbound>, NodeError> {
        let Some(j) = self.job.take_if(|j| j.id == job) else { return Ok(Vec::new()) };
        let (Some(round), Some(base)) = (self.round, self.base.as_ref()) else { return Ok(Vec::new()) };
        let delta = if self.passes == 0 && !j.extra {
            compute_gradient_steps(&self.learner, self.id, base.version, &base.params, &self.shard, j.steps, round)?
                .delta()
                .to_vec()
        } else {
            let working = base.params.add(&self.cumulative)?;
            let key = [self.id.0 as u64, round, self.passes];
            self.learner.sgd_delta(&working, &self.shard, j.steps, &key)?
        };
        if self.passes == 0 {
            self.cumulative = delta;
        } else {
            self.cumulative.iter_mut().zip(&delta).for_each(|(c, d)| *c += d);
        }
        self.steps_done += j.steps;
        let update = GradientUpdate::new(self.id, base.version, self.cumulative.clone(), self.steps_done)?;
        let mut rng = stream_rng(self.seed, &[stream::NOISE, self.id.0 as u64, round, self.passes]);
        let update = apply_noise(&update, &self.behavior, &mut rng)?;
        self.passes += 1;
        self.submitted = true;
        self.submissions += 1;
        let mut out = vec![Outbound::Send {
            to: NodeId::Validator(self.assigned_validator),
            msg: Msg::Submit { round, update },
        }];
        if self.policy.scheme == Scheme::Bap {
            out.push(self.start_job(self.job_steps, false));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    update: Option<GradientUpdate>,
    digest: Digest,
    reports: BTreeMap<ValidatorId, ValidationReport>,
}

/// What a committed block changed, as seen by the node that applied it.
#[derive(Clone, Debug, PartialEq)]
pub struct CommitNote {
    pub height: u64,
    pub closed_round: Option<u64>,
    pub opened: Option<(u64, ModelVersion)>,
    pub extended: Option<u64>,
}

/// The replicated application driven by consensus.
#[derive(Clone, Debug)]
pub struct Replica {
    id: ValidatorId,
    chain: Chain,
    validator: UpdateValidator,
    policy: SyncPolicy,
    eta: f64,
    local_round: RoundState,
    candidates: BTreeMap<TrainerId, Candidate>,
    now: VirtualTime,
    notes: Vec<CommitNote>,
    /// Reasons for dropped messages and refused blocks.
    pub log: Vec<String>,
}

impl Replica {
    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn local_round(&self) -> &RoundState {
        &self.local_round
    }

    pub fn close_decision(&self) -> CloseDecision {
        should_close(&self.policy, &self.local_round, self.now)
    }

    fn nonce(&self, height: u64, index: usize) -> u64 {
        (height << 20) | index as u64
    }

    fn close_transactions(&self, height: u64) -> Result<Vec<TxKind>, NodeError> {
        let state = self.chain.state();
        let round = self.local_round.round_id;
        let tolerance = self.validator.config.tolerance;
        let mut shares = Vec::new();
        let mut adjust = Vec::new();
        let mut accepted = Vec::new();
        for (t, c) in &self.candidates {
            let reports: Vec<_> = c.reports.values().cloned().collect();
            let Some(avg) = ValidationReport::average(&reports, tolerance) else { continue };
            if let (true, Some(update)) = (avg.accepted, &c.update) {
                shares.push(TxKind::ShareGradient { round, update: update.clone() });
                accepted.push(*t);
            }
            if state.scoring {
                let new_raw = state.trust.updated_raw(&avg, self.eta)?;
                if Some(new_raw) != state.trust.raw(*t) {
                    adjust.push(TxKind::TrustAdjust { trainer: *t, new_raw });
                }
            }
        }
        let mut kinds = shares;
        kinds.extend(adjust);
        kinds.push(TxKind::RoundControl { round, action: RoundAction::Close });
        if !accepted.is_empty() {
            let txs = self.wrap(height, kinds.clone());
            let after = state.preview(&txs)?;
            let weights = after.release_weights(&accepted)?;
            let applied: Vec<_> = accepted.into_iter().zip(weights).collect();
            let model = after.aggregate_release(&applied)?;
            kinds.push(TxKind::ReleaseModel { model, applied });
        }
        kinds.push(TxKind::RoundControl {
            round: round + 1,
            action: RoundAction::Open { at: self.now, deadline: self.policy.deadline_from(self.now) },
        });
        Ok(kinds)
    }

    fn wrap(&self, height: u64, kinds: Vec<TxKind>) -> Vec<Transaction> {
        kinds.into_iter().enumerate().map(|(i, k)| Transaction::new(k, self.id, self.nonce(height, i))).collect()
    }

    fn build(&self, height: u64) -> Result<Option<Block>, NodeError> {
        let kinds = match self.close_decision() {
            CloseDecision::KeepOpen => return Ok(None),
            CloseDecision::Extend { by } => {
                vec![TxKind::RoundControl { round: self.local_round.round_id, action: RoundAction::Extend { by } }]
            }
            CloseDecision::Close => self.close_transactions(height)?,
        };
        Ok(Some(self.chain.build_block(self.wrap(height, kinds), self.id)?))
    }

    fn record(&mut self, trainer: TrainerId, candidate: Candidate) -> bool {
        match on_submission(&self.policy, &mut self.local_round, trainer) {
            Ok(_) => {
                self.candidates.insert(trainer, candidate);
                true
            }
            Err(e) => {
                self.log.push(format!("{}: dropped update from {trainer}: {e}", self.now));
                false
            }
        }
    }
}

impl ConsensusApp<Block> for Replica {
    fn propose(&mut self, height: u64, _round: u64) -> Option<Block> {
        if height != self.chain.height() + 1 {
            return None;
        }
        match self.build(height) {
            Ok(b) => b,
            Err(e) => {
                self.log.push(format!("{}: could not assemble block {height}: {e}", self.now));
                None
            }
        }
    }

    fn validate(&mut self, height: u64, value: &Block) -> bool {
        if value.height != height {
            return false;
        }
        match self.chain.check(value) {
            Ok(_) => true,
            Err(e) => {
                self.log.push(format!("{}: refused block {height}: {e}", self.now));
                false
            }
        }
    }

    fn commit(&mut self, height: u64, value: &Block) {
        let before = self.chain.state().round_state.clone();
        if let Err(e) = self.chain.append(value.clone()) {
            // Consensus only decides blocks that validated; reaching this is a bug.
            panic!("decided block {height} does not apply: {e}");
        }
        let state = self.chain.state();
        let after = state.round_state.clone();
        let mut note = CommitNote { height, closed_round: None, opened: None, extended: None };
        if after.round_id != before.round_id {
            note.closed_round = Some(before.round_id);
            note.opened = Some((after.round_id, state.current_model.clone()));
            self.local_round = after;
            self.candidates.clear();
        } else if after.extension_granted && !before.extension_granted {
            note.extended = Some(after.round_id);
            self.local_round.extension_granted = true;
            self.local_round.deadline = after.deadline;
        }
        self.notes.push(note);
    }
}

/// A validator: validates and gossips updates, runs consensus on blocks and
/// keeps a ledger replica.
#[derive(Clone, Debug)]
pub struct ValidatorNode {
    pub id: ValidatorId,
    pub behavior: NodeBehavior,
    pub trainers: Vec<TrainerId>,
    peers: Vec<ValidatorId>,
    engine: Engine<Block>,
    replica: Replica,
    /// Messages for the next round that arrived before its opening committed.
    early: Vec<(ValidatorId, Msg)>,
    closed: Vec<(u64, u64, VirtualTime)>,
}

pub struct ValidatorSetup {
    pub id: ValidatorId,
    pub behavior: NodeBehavior,
    pub validators: Vec<ValidatorId>,
    pub trainers: Vec<TrainerId>,
    pub genesis: Block,
    pub validator: UpdateValidator,
    pub policy: SyncPolicy,
    pub eta: f64,
    pub keys: KeyRing,
    pub timeouts: TimeoutConfig,
}

impl ValidatorNode {
    pub fn new(setup: ValidatorSetup) -> Result<Self, NodeError> {
        let chain = Chain::from_genesis(setup.genesis)?;
        let engine = Engine::new(EngineConfig {
            id: setup.id,
            validators: setup.validators.clone(),
            keys: setup.keys,
            timeouts: setup.timeouts,
            initial_height: 1,
            idle_until_woken: true,
        })?;
        let local_round = chain.state().round_state.clone();
        Ok(Self {
            id: setup.id,
            behavior: setup.behavior,
            trainers: setup.trainers,
            peers: setup.validators.into_iter().filter(|v| *v != setup.id).collect(),
            engine,
            replica: Replica {
                id: setup.id,
                chain,
                validator: setup.validator,
                policy: setup.policy,
                eta: setup.eta,
                local_round,
                candidates: BTreeMap::new(),
                now: VirtualTime::ZERO,
                notes: Vec::new(),
                log: Vec::new(),
            },
            early: Vec::new(),
            closed: Vec::new(),
        })
    }

    pub fn chain(&self) -> &Chain {
        self.replica.chain()
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn engine(&self) -> &Engine<Block> {
        &self.engine
    }

    /// Rounds closed by committed blocks since the last call, with the
    /// closing height and the time at which this node applied it.
    pub fn drain_closed(&mut self) -> Vec<(u64, u64, VirtualTime)> {
        std::mem::take(&mut self.closed)
    }

    pub fn start(&mut self, now: VirtualTime) -> Vec<Outbound> {
        self.replica.now = now;
        let mut out = Vec::new();
        let state = self.replica.chain.state();
        let (round, model, deadline) =
            (state.round_state.round_id, state.current_model.clone(), state.round_state.deadline);
        for t in &self.trainers {
            out.push(Outbound::Send { to: NodeId::Trainer(*t), msg: Msg::RoundOpened { round, model: model.clone() } });
        }
        if let Some(d) = deadline {
            out.push(Outbound::Timer { after: d - now, timer: NodeTimer::Deadline { round } });
        }
        let o = self.engine.start(&mut self.replica);
        self.absorb(o, &mut out);
        self.maybe_wake(&mut out);
        out
    }

    pub fn on_timer(&mut self, now: VirtualTime, timer: NodeTimer) -> Result<Vec<Outbound>, NodeError> {
        self.replica.now = now;
        let mut out = Vec::new();
        match timer {
            NodeTimer::Consensus(t) => {
                let o = self.engine.handle_timeout(&mut self.replica, t);
                self.absorb(o, &mut out);
            }
            NodeTimer::Deadline { .. } => {}
            NodeTimer::JobDone { .. } => return Ok(out),
        }
        self.maybe_wake(&mut out);
        Ok(out)
    }

    pub fn handle(&mut self, now: VirtualTime, from: NodeId, msg: Msg) -> Result<Vec<Outbound>, NodeError> {
        self.replica.now = now;
        let mut out = Vec::new();
        match from {
            NodeId::Trainer(t) => {
                if let Msg::Submit { round, update } = msg {
                    if update.trainer_id == t && self.trainers.contains(&t) {
                        self.on_submit(round, update, &mut out)?;
                    }
                }
            }
            NodeId::Validator(v) => self.on_peer(v, msg, &mut out)?,
        }
        self.maybe_wake(&mut out);
        Ok(out)
    }

    fn on_submit(&mut self, round: u64, update: GradientUpdate, out: &mut Vec<Outbound>) -> Result<(), NodeError> {
        let state = self.replica.chain.state();
        let current = &state.current_model;
        let rid = self.replica.local_round.round_id;
        if round != rid || update.base_version != current.version {
            self.replica.log.push(format!(
                "{}: late update from {} for round {round} (open round {rid}); re-sent model",
                self.replica.now, update.trainer_id
            ));
            out.push(Outbound::Send {
                to: NodeId::Trainer(update.trainer_id),
                msg: Msg::RoundOpened { round: rid, model: current.clone() },
            });
            return Ok(());
        }
        let current = current.clone();
        let report = self.replica.validator.validate(&current, &update, round)?;
        let digest = update.digest();
        let candidate = Candidate {
            update: report.accepted.then(|| update.clone()),
            digest,
            reports: BTreeMap::from([(self.id, report.clone())]),
        };
        if !self.replica.record(update.trainer_id, candidate) {
            return Ok(());
        }
        let msg = if report.accepted {
            Msg::Share { round, update, report }
        } else {
            Msg::Report { round, update: digest, report }
        };
        self.gossip(msg, out);
        Ok(())
    }

    fn on_peer(&mut self, from: ValidatorId, msg: Msg, out: &mut Vec<Outbound>) -> Result<(), NodeError> {
        if !self.peers.contains(&from) {
            return Ok(());
        }
        if let Msg::Consensus(m) = msg {
            let o = self.engine.handle_message(&mut self.replica, from, m);
            self.absorb(o, out);
            return Ok(());
        }
        let rid = self.replica.local_round.round_id;
        match msg.round() {
            Some(r) if r == rid => {}
            Some(r) if r == rid + 1 => {
                self.early.push((from, msg));
                return Ok(());
            }
            _ => return Ok(()),
        }
        match msg {
            Msg::Share { round, update, report } => {
                let current = self.replica.chain.state().current_model.clone();
                if update.base_version != current.version || report.trainer_id != update.trainer_id {
                    return Ok(());
                }
                let t = update.trainer_id;
                let digest = update.digest();
                let mut reports = BTreeMap::from([(from, report)]);
                match self.replica.candidates.get_mut(&t) {
                    Some(c) if c.digest == digest && c.update.is_some() => return Ok(()),
                    Some(c) if c.digest == digest => {
                        reports.append(&mut c.reports);
                    }
                    _ => {}
                }
                let mine = self.replica.validator.validate(&current, &update, round)?;
                reports.insert(self.id, mine.clone());
                let candidate = Candidate { update: Some(update), digest, reports };
                if self.replica.record(t, candidate) {
                    self.gossip(Msg::Report { round, update: digest, report: mine }, out);
                }
            }
            Msg::Report { update: digest, report, .. } => {
                let t = report.trainer_id;
                match self.replica.candidates.get_mut(&t) {
                    Some(c) if c.digest == digest => {
                        c.reports.insert(from, report);
                    }
                    _ => {
                        let candidate =
                            Candidate { update: None, digest, reports: BTreeMap::from([(from, report)]) };
                        self.replica.record(t, candidate);
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn gossip(&self, msg: Msg, out: &mut Vec<Outbound>) {
        for p in &self.peers {
            out.push(Outbound::Send { to: NodeId::Validator(*p), msg: msg.clone() });
        }
    }

    fn maybe_wake(&mut self, out: &mut Vec<Outbound>) {
        if self.replica.close_decision() != CloseDecision::KeepOpen {
            let o = self.engine.wake(&mut self.replica);
            self.absorb(o, out);
        }
    }

    fn absorb(&mut self, o: Output<Block>, out: &mut Vec<Outbound>) {
        for (t, after) in o.timers {
            out.push(Outbound::Timer { after, timer: NodeTimer::Consensus(t) });
        }
        for (to, m) in o.direct {
            out.push(Outbound::Send { to: NodeId::Validator(to), msg: Msg::Consensus(m) });
        }
        let equivocate = self.behavior.profile == Profile::Equivocator;
        for m in o.broadcast {
            for (i, p) in self.peers.iter().enumerate() {
                let m = match (&m, equivocate && i % 2 == 1) {
                    (Message::Vote(v), true) => Message::Vote(self.flip(v)),
                    _ => m.clone(),
                };
                out.push(Outbound::Send { to: NodeId::Validator(*p), msg: Msg::Consensus(m) });
            }
        }
        for note in std::mem::take(&mut self.replica.notes) {
            self.after_commit(note, out);
        }
    }

    fn flip(&self, v: &Vote) -> Vote {
        let value = match v.value {
            Some(_) => None,
            None => Some(Digest::of(&v.round.to_le_bytes())),
        };
        self.engine.keys().sign(Vote { value, ..*v })
    }

    fn after_commit(&mut self, note: CommitNote, out: &mut Vec<Outbound>) {
        let now = self.replica.now;
        if let Some(r) = note.closed_round {
            self.closed.push((r, note.height, now));
        }
        let deadline = self.replica.local_round.deadline;
        if let Some((round, model)) = note.opened {
            for t in &self.trainers {
                out.push(Outbound::Send {
                    to: NodeId::Trainer(*t),
                    msg: Msg::RoundOpened { round, model: model.clone() },
                });
            }
            if let Some(d) = deadline {
                out.push(Outbound::Timer { after: d - now.min(d), timer: NodeTimer::Deadline { round } });
            }
            for (from, msg) in std::mem::take(&mut self.early) {
                if let Err(e) = self.on_peer(from, msg, out) {
                    self.replica.log.push(format!("{now}: early message failed: {e}"));
                }
            }
        }
        if let Some(round) = note.extended {
            for t in &self.trainers {
                out.push(Outbound::Send { to: NodeId::Trainer(*t), msg: Msg::RoundExtended { round } });
            }
            if let Some(d) = deadline {
                out.push(Outbound::Timer { after: d - now.min(d), timer: NodeTimer::Deadline { round } });
            }
        }
    }
}
