use std::collections::{BTreeMap, BTreeSet};

use super::{
    proposer_for, quorum_size, ConsensusError, ConsensusValue, KeyRing, Message, Proposal, Step, Timeout, Vote,
    VoteKind,
};
use crate::ids::ValidatorId;
use crate::params::Digest;
use crate::time::Ticks;

/// Heights of decided values sent to a lagging peer in one reply.
const MAX_CATCH_UP: u64 = 16;
/// Future messages held back until the next height starts.
const MAX_BUFFERED: usize = 4096;

/// Hooks into the replicated application.
pub trait ConsensusApp<V> {
    /// Value to propose, or `None` to hold off until [`Engine::wake`].
    fn propose(&mut self, height: u64, round: u64) -> Option<V>;
    fn validate(&mut self, height: u64, value: &V) -> bool;
    /// Called exactly once per height, before the next height starts.
    fn commit(&mut self, height: u64, value: &V);
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeoutConfig {
    pub propose: Ticks,
    pub prevote: Ticks,
    pub precommit: Ticks,
}

impl TimeoutConfig {
    pub fn uniform(t: Ticks) -> Self {
        Self { propose: t, prevote: t, precommit: t }
    }

    /// Base timeout for `step`, doubled for every round within the height.
    pub fn duration(&self, step: Step, round: u64) -> Ticks {
        let base = match step {
            Step::Propose => self.propose,
            Step::Prevote => self.prevote,
            Step::Precommit | Step::Committed => self.precommit,
        };
        base.saturating_mul(1u64 << round.min(20))
    }
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub id: ValidatorId,
    pub validators: Vec<ValidatorId>,
    pub keys: KeyRing,
    pub timeouts: TimeoutConfig,
    pub initial_height: u64,
    /// When set, non-proposers arm no propose timeout in round 0 until
    /// [`Engine::wake`] is called. Lets a replicated application sit idle
    /// between decisions without cycling through empty rounds.
    pub idle_until_woken: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Evidence {
    ConflictingVote { voter: ValidatorId, height: u64, round: u64, kind: VoteKind, first: Option<Digest>, second: Option<Digest> },
    ConflictingProposal { proposer: ValidatorId, height: u64, round: u64, first: Digest, second: Digest },
}

#[derive(Clone, Debug)]
pub struct Output<V> {
    /// To every other validator.
    pub broadcast: Vec<Message<V>>,
    pub direct: Vec<(ValidatorId, Message<V>)>,
    pub timers: Vec<(Timeout, Ticks)>,
    pub decided: Vec<(u64, V)>,
}

impl<V> Default for Output<V> {
    fn default() -> Self {
        Self { broadcast: Vec::new(), direct: Vec::new(), timers: Vec::new(), decided: Vec::new() }
    }
}

impl<V> Output<V> {
    pub fn is_empty(&self) -> bool {
        self.broadcast.is_empty() && self.direct.is_empty() && self.timers.is_empty() && self.decided.is_empty()
    }
}

type Tally = BTreeMap<ValidatorId, Vote>;

#[derive(Clone, Debug)]
pub struct Engine<V> {
    cfg: EngineConfig,
    quorum: usize,
    /// Distinct senders that prove at least one honest validator is involved.
    skip_threshold: usize,
    height: u64,
    round: u64,
    step: Step,
    locked: Option<(u64, V)>,
    valid: Option<(u64, V)>,
    proposals: BTreeMap<u64, Proposal<V>>,
    votes: BTreeMap<(u64, VoteKind), Tally>,
    senders: BTreeMap<u64, BTreeSet<ValidatorId>>,
    validity: BTreeMap<Digest, bool>,
    quorum_seen: BTreeSet<u64>,
    /// Rounds whose proposal carried a valid lock proof.
    proven: BTreeSet<u64>,
    woken: bool,
    propose_timer_set: bool,
    awaiting_value: bool,
    future: Vec<(ValidatorId, Message<V>)>,
    certified: BTreeMap<u64, (V, Vec<Vote>)>,
    helped: BTreeSet<(ValidatorId, u64, u64)>,
    history: Vec<(V, Vec<Vote>)>,
    evidence: Vec<Evidence>,
}

impl<V: ConsensusValue> Engine<V> {
    pub fn new(cfg: EngineConfig) -> Result<Self, ConsensusError> {
        let quorum = quorum_size(cfg.validators.len())?;
        let distinct: BTreeSet<_> = cfg.validators.iter().collect();
        if distinct.len() != cfg.validators.len() {
            let dup = cfg.validators.iter().find(|v| cfg.validators.iter().filter(|w| w == v).count() > 1);
            return Err(ConsensusError::DuplicateValidator(*dup.expect("a duplicate exists")));
        }
        if !distinct.contains(&cfg.id) {
            return Err(ConsensusError::UnknownValidator(cfg.id));
        }
        Ok(Self {
            skip_threshold: cfg.validators.len() - quorum + 1,
            quorum,
            height: cfg.initial_height,
            round: 0,
            step: Step::Propose,
            locked: None,
            valid: None,
            proposals: BTreeMap::new(),
            votes: BTreeMap::new(),
            senders: BTreeMap::new(),
            validity: BTreeMap::new(),
            quorum_seen: BTreeSet::new(),
            proven: BTreeSet::new(),
            woken: false,
            propose_timer_set: false,
            awaiting_value: false,
            future: Vec::new(),
            certified: BTreeMap::new(),
            helped: BTreeSet::new(),
            history: Vec::new(),
            evidence: Vec::new(),
            cfg,
        })
    }

    pub fn id(&self) -> ValidatorId {
        self.cfg.id
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn step(&self) -> Step {
        self.step
    }

    pub fn keys(&self) -> &KeyRing {
        &self.cfg.keys
    }

    pub fn quorum(&self) -> usize {
        self.quorum
    }

    pub fn locked_digest(&self) -> Option<Digest> {
        self.locked.as_ref().map(|(_, v)| v.value_digest())
    }

    pub fn evidence(&self) -> &[Evidence] {
        &self.evidence
    }

    /// Decided values with their commit certificates, from the initial height on.
    pub fn decisions(&self) -> &[(V, Vec<Vote>)] {
        &self.history
    }

    pub fn is_proposer(&self) -> bool {
        proposer_for(self.height, self.round, &self.cfg.validators) == self.cfg.id
    }

    /// Recorded vote of `voter` for the current height.
    pub fn vote_of(&self, round: u64, kind: VoteKind, voter: ValidatorId) -> Option<Option<Digest>> {
        self.votes.get(&(round, kind)).and_then(|t| t.get(&voter)).map(|v| v.value)
    }

    pub fn start(&mut self, app: &mut impl ConsensusApp<V>) -> Output<V> {
        let mut out = Output::default();
        self.start_round(0, app, &mut out);
        self.process(app, &mut out);
        out
    }

    /// Arms the propose timeout and retries a held-off proposal.
    pub fn wake(&mut self, app: &mut impl ConsensusApp<V>) -> Output<V> {
        let mut out = Output::default();
        self.woken = true;
        if self.step == Step::Propose {
            if self.awaiting_value && self.is_proposer() {
                self.try_propose(app, &mut out);
            }
            if self.step == Step::Propose {
                self.arm_propose_timer(&mut out);
            }
        }
        self.process(app, &mut out);
        out
    }

    pub fn handle_timeout(&mut self, app: &mut impl ConsensusApp<V>, t: Timeout) -> Output<V> {
        let mut out = Output::default();
        if t.height != self.height || t.round != self.round {
            return out;
        }
        match (t.step, self.step) {
            (Step::Propose, Step::Propose) => self.enter_prevote(None, &mut out),
            (Step::Prevote, Step::Prevote) => self.enter_precommit(None, &mut out),
            (Step::Precommit, Step::Precommit) => self.start_round(self.round + 1, app, &mut out),
            _ => {}
        }
        self.process(app, &mut out);
        out
    }

    pub fn handle_message(&mut self, app: &mut impl ConsensusApp<V>, from: ValidatorId, msg: Message<V>) -> Output<V> {
        let mut out = Output::default();
        if from == self.cfg.id || !self.cfg.validators.contains(&from) {
            return out;
        }
        if let Message::Vote(v) = &msg {
            if v.voter != from || !self.cfg.keys.verify(v) {
                return out;
            }
        }
        let h = msg.height();
        if let Message::Decided { height, value, certificate } = msg {
            if height >= self.height
                && height < self.height + 4 * MAX_CATCH_UP
                && !self.certified.contains_key(&height)
                && self.certifies(height, &value, &certificate)
            {
                self.certified.insert(height, (value, certificate));
            }
        } else if h < self.height {
            self.help(from, h, msg.round().unwrap_or(0), &mut out);
            return out;
        } else if h > self.height {
            if h == self.height + 1 && self.future.len() < MAX_BUFFERED {
                self.future.push((from, msg));
            }
            return out;
        } else {
            self.record(from, msg);
        }
        self.process(app, &mut out);
        out
    }

    fn help(&mut self, peer: ValidatorId, from_height: u64, round: u64, out: &mut Output<V>) {
        if !self.helped.insert((peer, from_height, round)) {
            return;
        }
        let first = self.cfg.initial_height;
        let end = self.height.min(from_height + MAX_CATCH_UP);
        for h in from_height.max(first)..end {
            let (value, certificate) = self.history[(h - first) as usize].clone();
            out.direct.push((peer, Message::Decided { height: h, value, certificate }));
        }
    }

    /// A quorum of distinct, correctly signed precommits for `value` in one round.
    fn certifies(&self, height: u64, value: &V, certificate: &[Vote]) -> bool {
        let d = Some(value.value_digest());
        let Some(round) = certificate.first().map(|v| v.round) else { return false };
        let mut voters = BTreeSet::new();
        for v in certificate {
            let ok = v.height == height
                && v.round == round
                && v.kind == VoteKind::Precommit
                && v.value == d
                && self.cfg.validators.contains(&v.voter)
                && self.cfg.keys.verify(v);
            if !ok {
                return false;
            }
            voters.insert(v.voter);
        }
        voters.len() >= self.quorum
    }

    fn record(&mut self, from: ValidatorId, msg: Message<V>) {
        match msg {
            Message::Proposal(p) => {
                if p.proposer != from || proposer_for(p.height, p.round, &self.cfg.validators) != from {
                    return;
                }
                self.senders.entry(p.round).or_default().insert(from);
                match self.proposals.get(&p.round) {
                    Some(first) => {
                        let (a, b) = (first.value.value_digest(), p.value.value_digest());
                        if a != b {
                            self.evidence.push(Evidence::ConflictingProposal {
                                proposer: from,
                                height: p.height,
                                round: p.round,
                                first: a,
                                second: b,
                            });
                        }
                    }
                    None => {
                        if let Some(vr) = p.valid_round {
                            let d = Some(p.value.value_digest());
                            let mut voters = BTreeSet::new();
                            for v in &p.lock_proof {
                                let ok = v.height == self.height
                                    && v.round == vr
                                    && v.kind == VoteKind::Prevote
                                    && v.value == d
                                    && self.cfg.validators.contains(&v.voter)
                                    && self.cfg.keys.verify(v);
                                if ok {
                                    voters.insert(v.voter);
                                    self.record_vote(*v);
                                }
                            }
                            // The proof stands on its own even where an
                            // equivocator's other vote reached us first.
                            if voters.len() >= self.quorum {
                                self.proven.insert(p.round);
                            }
                        }
                        self.proposals.insert(p.round, p);
                    }
                }
            }
            Message::Vote(v) => self.record_vote(v),
            Message::Decided { .. } => {}
        }
    }

    fn record_vote(&mut self, v: Vote) {
        self.senders.entry(v.round).or_default().insert(v.voter);
        let tally = self.votes.entry((v.round, v.kind)).or_default();
        match tally.get(&v.voter) {
            Some(first) if first.value != v.value => self.evidence.push(Evidence::ConflictingVote {
                voter: v.voter,
                height: v.height,
                round: v.round,
                kind: v.kind,
                first: first.value,
                second: v.value,
            }),
            Some(_) => {}
            None => {
                tally.insert(v.voter, v);
            }
        }
    }

    fn count(&self, round: u64, kind: VoteKind, value: Option<Digest>) -> usize {
        self.votes.get(&(round, kind)).map_or(0, |t| t.values().filter(|v| v.value == value).count())
    }

    fn is_valid(&mut self, app: &mut impl ConsensusApp<V>, value: &V) -> bool {
        let d = value.value_digest();
        if let Some(ok) = self.validity.get(&d) {
            return *ok;
        }
        let ok = app.validate(self.height, value);
        self.validity.insert(d, ok);
        ok
    }

    fn start_round(&mut self, round: u64, app: &mut impl ConsensusApp<V>, out: &mut Output<V>) {
        self.round = round;
        self.step = Step::Propose;
        self.propose_timer_set = false;
        self.awaiting_value = false;
        if self.is_proposer() {
            self.try_propose(app, out);
        }
        if self.step == Step::Propose && (self.woken || round > 0 || !self.cfg.idle_until_woken) {
            self.arm_propose_timer(out);
        }
    }

    fn arm_propose_timer(&mut self, out: &mut Output<V>) {
        if !self.propose_timer_set {
            self.propose_timer_set = true;
            self.schedule(Step::Propose, out);
        }
    }

    fn try_propose(&mut self, app: &mut impl ConsensusApp<V>, out: &mut Output<V>) {
        let (value, valid_round) = match &self.valid {
            Some((r, v)) => (Some(v.clone()), Some(*r)),
            None => (app.propose(self.height, self.round), None),
        };
        let Some(value) = value else {
            self.awaiting_value = true;
            return;
        };
        self.awaiting_value = false;
        let lock_proof = match valid_round {
            Some(vr) => {
                let d = Some(value.value_digest());
                self.votes[&(vr, VoteKind::Prevote)].values().filter(|v| v.value == d).copied().collect()
            }
            None => Vec::new(),
        };
        let p = Proposal {
            height: self.height,
            round: self.round,
            value,
            valid_round,
            proposer: self.cfg.id,
            lock_proof,
        };
        out.broadcast.push(Message::Proposal(p.clone()));
        self.senders.entry(p.round).or_default().insert(self.cfg.id);
        self.proposals.insert(p.round, p);
    }

    fn schedule(&self, step: Step, out: &mut Output<V>) {
        let t = Timeout { height: self.height, round: self.round, step };
        out.timers.push((t, self.cfg.timeouts.duration(step, self.round)));
    }

    fn cast(&mut self, kind: VoteKind, value: Option<Digest>, out: &mut Output<V>) {
        let v = Vote { height: self.height, round: self.round, kind, voter: self.cfg.id, value, signature: Digest::ZERO };
        let v = self.cfg.keys.sign(v);
        self.record_vote(v);
        out.broadcast.push(Message::Vote(v));
    }

    fn enter_prevote(&mut self, value: Option<Digest>, out: &mut Output<V>) {
        self.cast(VoteKind::Prevote, value, out);
        self.step = Step::Prevote;
        self.schedule(Step::Prevote, out);
    }

    fn enter_precommit(&mut self, value: Option<Digest>, out: &mut Output<V>) {
        self.cast(VoteKind::Precommit, value, out);
        self.step = Step::Precommit;
        self.schedule(Step::Precommit, out);
    }

    fn process(&mut self, app: &mut impl ConsensusApp<V>, out: &mut Output<V>) {
        while self.try_decide(app, out)
            || self.try_skip_round(app, out)
            || self.try_prevote(app, out)
            || self.try_lock(app, out)
            || self.try_precommit_nil(out)
        {}
    }

    fn try_decide(&mut self, app: &mut impl ConsensusApp<V>, out: &mut Output<V>) -> bool {
        let mut chosen = None;
        let rounds: Vec<u64> = self.proposals.keys().copied().collect();
        for r in rounds {
            let value = self.proposals[&r].value.clone();
            let d = Some(value.value_digest());
            if self.count(r, VoteKind::Precommit, d) >= self.quorum && self.is_valid(app, &value) {
                let cert = self.votes[&(r, VoteKind::Precommit)].values().filter(|v| v.value == d).copied().collect();
                chosen = Some((value, cert));
                break;
            }
        }
        if chosen.is_none() {
            chosen = self.certified.remove(&self.height);
        }
        let Some((value, cert)) = chosen else { return false };
        self.decide(value, cert, app, out);
        true
    }

    fn decide(&mut self, value: V, cert: Vec<Vote>, app: &mut impl ConsensusApp<V>, out: &mut Output<V>) {
        self.step = Step::Committed;
        app.commit(self.height, &value);
        out.decided.push((self.height, value.clone()));
        self.history.push((value, cert));
        self.height += 1;
        self.locked = None;
        self.valid = None;
        self.proposals.clear();
        self.votes.clear();
        self.senders.clear();
        self.validity.clear();
        self.quorum_seen.clear();
        self.proven.clear();
        self.woken = false;
        let h = self.height;
        self.certified.retain(|height, _| *height >= h);
        self.start_round(0, app, out);
        for (from, msg) in std::mem::take(&mut self.future) {
            if msg.height() == h {
                self.record(from, msg);
            }
        }
    }

    fn try_skip_round(&mut self, app: &mut impl ConsensusApp<V>, out: &mut Output<V>) -> bool {
        let target = self
            .senders
            .range(self.round + 1..)
            .filter(|(_, s)| s.len() >= self.skip_threshold)
            .map(|(r, _)| *r)
            .next_back();
        match target {
            Some(r) => {
                self.start_round(r, app, out);
                true
            }
            None => false,
        }
    }

    fn try_prevote(&mut self, app: &mut impl ConsensusApp<V>, out: &mut Output<V>) -> bool {
        if self.step != Step::Propose {
            return false;
        }
        let Some(p) = self.proposals.get(&self.round) else { return false };
        let (value, vr) = (p.value.clone(), p.valid_round);
        let d = value.value_digest();
        let locked_on = |locked: &Option<(u64, V)>| locked.as_ref().map(|(_, v)| v.value_digest());
        let vote = match vr {
            None => {
                let ok = self.is_valid(app, &value) && (self.locked.is_none() || locked_on(&self.locked) == Some(d));
                ok.then_some(d)
            }
            Some(vr)
                if vr < self.round
                    && (self.proven.contains(&self.round) || self.count(vr, VoteKind::Prevote, Some(d)) >= self.quorum) =>
            {
                let lock_ok = match &self.locked {
                    None => true,
                    Some((lr, lv)) => *lr <= vr || lv.value_digest() == d,
                };
                (self.is_valid(app, &value) && lock_ok).then_some(d)
            }
            Some(_) => return false,
        };
        self.enter_prevote(vote, out);
        true
    }

    fn try_lock(&mut self, app: &mut impl ConsensusApp<V>, out: &mut Output<V>) -> bool {
        if !matches!(self.step, Step::Prevote | Step::Precommit) || self.quorum_seen.contains(&self.round) {
            return false;
        }
        let Some(p) = self.proposals.get(&self.round) else { return false };
        let value = p.value.clone();
        let d = value.value_digest();
        if self.count(self.round, VoteKind::Prevote, Some(d)) < self.quorum || !self.is_valid(app, &value) {
            return false;
        }
        self.quorum_seen.insert(self.round);
        if self.step == Step::Prevote {
            self.locked = Some((self.round, value.clone()));
            self.enter_precommit(Some(d), out);
        }
        self.valid = Some((self.round, value));
        true
    }

    fn try_precommit_nil(&mut self, out: &mut Output<V>) -> bool {
        if self.step != Step::Prevote || self.count(self.round, VoteKind::Prevote, None) < self.quorum {
            return false;
        }
        self.enter_precommit(None, out);
        true
    }
}
