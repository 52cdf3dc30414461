//! Randomized network harness for the consensus engine, with Byzantine
//! validators that stay silent, equivocate, or vote for everything.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    max_faulty, ConsensusApp, ConsensusValue, Engine, EngineConfig, KeyRing, Message, Output, Proposal,
    TimeoutConfig, Timeout, Vote, VoteKind,
};
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::ids::ValidatorId;
use crate::netsim::{deliver, EventQueue, LatencyModel};
use crate::params::Digest;
use crate::rng::{derive_seed, stream, stream_rng};
use crate::time::VirtualTime;

/// Opaque test value; proposers draw a random payload per (height, round).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimValue {
    pub height: u64,
    pub proposer: ValidatorId,
    pub payload: u64,
}

impl Canonical for SimValue {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.height).u32(self.proposer.0).u64(self.payload);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self { height: dec.u64()?, proposer: ValidatorId(dec.u32()?), payload: dec.u64()? })
    }
}

impl ConsensusValue for SimValue {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ByzantineStrategy {
    /// Sends nothing.
    Silent,
    /// Sends different proposals and votes to different halves of the network.
    Equivocate,
    /// Prevotes and precommits every proposal it sees, in every round.
    Conflicting,
}

impl ByzantineStrategy {
    pub const ALL: [ByzantineStrategy; 3] =
        [ByzantineStrategy::Silent, ByzantineStrategy::Equivocate, ByzantineStrategy::Conflicting];
}

#[derive(Clone, Debug)]
pub struct ConsensusSimConfig {
    pub n: usize,
    pub byzantine: BTreeMap<ValidatorId, ByzantineStrategy>,
    pub latency: LatencyModel,
    pub timeouts: TimeoutConfig,
    /// Stop once every honest validator has decided this many heights.
    pub target_heights: u64,
    pub max_time: VirtualTime,
    pub seed: u64,
}

impl ConsensusSimConfig {
    /// A random adversarial schedule: f = max tolerated Byzantine validators
    /// with random strategies, random delays, and message loss before a
    /// random stabilization time.
    pub fn randomized(n: usize, seed: u64, target_heights: u64) -> Self {
        let mut rng = stream_rng(seed, &[stream::BYZANTINE, n as u64]);
        let mut ids: Vec<ValidatorId> = (0..n as u32).map(ValidatorId).collect();
        ids.shuffle(&mut rng);
        let byzantine = ids
            .into_iter()
            .take(max_faulty(n))
            .map(|v| (v, ByzantineStrategy::ALL[rng.random_range(0..3)]))
            .collect();
        let base = rng.random_range(1..20);
        let latency = LatencyModel {
            base,
            jitter: rng.random_range(0..60),
            drop_prob: rng.random_range(0.0..0.3),
            gst: Some(VirtualTime(rng.random_range(0..3000))),
        };
        let t = rng.random_range(20..120);
        Self {
            n,
            byzantine,
            latency,
            timeouts: TimeoutConfig::uniform(t),
            target_heights,
            max_time: VirtualTime(5_000_000),
            seed,
        }
    }

    pub fn validators(&self) -> Vec<ValidatorId> {
        (0..self.n as u32).map(ValidatorId).collect()
    }

    pub fn is_honest(&self, v: ValidatorId) -> bool {
        !self.byzantine.contains_key(&v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusSimReport {
    /// Decided value digests per honest validator, by height.
    pub decisions: BTreeMap<ValidatorId, Vec<Digest>>,
    pub messages_sent: u64,
    pub evidence: usize,
    pub end_time: VirtualTime,
    /// Highest round reached at any decided height by an honest validator.
    pub max_round: u64,
}

impl ConsensusSimReport {
    /// First height at which two honest validators decided differently.
    pub fn fork_height(&self) -> Option<u64> {
        let longest = self.decisions.values().map(Vec::len).max().unwrap_or(0);
        (0..longest).find_map(|h| {
            let mut seen = self.decisions.values().filter_map(|d| d.get(h));
            let first = seen.next()?;
            seen.any(|d| d != first).then_some(h as u64)
        })
    }

    /// Heights decided by every honest validator.
    pub fn min_committed(&self) -> u64 {
        self.decisions.values().map(|d| d.len() as u64).min().unwrap_or(0)
    }
}

struct HonestApp {
    seed: u64,
    id: ValidatorId,
    decided: Vec<Digest>,
}

impl ConsensusApp<SimValue> for HonestApp {
    fn propose(&mut self, height: u64, round: u64) -> Option<SimValue> {
        let payload = derive_seed(self.seed, &[stream::BYZANTINE, 1, self.id.0 as u64, height, round]);
        Some(SimValue { height, proposer: self.id, payload })
    }

    fn validate(&mut self, height: u64, value: &SimValue) -> bool {
        value.height == height
    }

    fn commit(&mut self, height: u64, value: &SimValue) {
        debug_assert_eq!(height as usize, self.decided.len());
        self.decided.push(value.value_digest());
    }
}

enum Event {
    Deliver { from: ValidatorId, msg: Message<SimValue> },
    Timer(Timeout),
}

struct Node {
    engine: Engine<SimValue>,
    app: HonestApp,
    strategy: Option<ByzantineStrategy>,
    /// Rounds a conflicting voter has already attacked.
    attacked: BTreeSet<(u64, u64, Digest)>,
}

struct Network<'w> {
    queue: EventQueue<ValidatorId, Event>,
    rng: ChaCha8Rng,
    latency: LatencyModel,
    validators: Vec<ValidatorId>,
    sent: u64,
    trace: Option<&'w mut dyn Write>,
}

impl Network<'_> {
    fn send(&mut self, from: ValidatorId, to: ValidatorId, msg: Message<SimValue>) -> io::Result<()> {
        self.sent += 1;
        let now = self.queue.now();
        if let Some(w) = self.trace.as_deref_mut() {
            writeln!(
                w,
                "{} {}->{} {} h={} r={} {}",
                now.0,
                from,
                to,
                msg.label(),
                msg.height(),
                msg.round().map_or("-".to_string(), |r| r.to_string()),
                describe(&msg)
            )?;
        }
        if let Some(at) = deliver(&self.latency, &mut self.rng, now) {
            self.queue.schedule(at, to, Event::Deliver { from, msg });
        }
        Ok(())
    }

    fn broadcast(&mut self, from: ValidatorId, msg: &Message<SimValue>) -> io::Result<()> {
        for to in self.validators.clone() {
            if to != from {
                self.send(from, to, msg.clone())?;
            }
        }
        Ok(())
    }
}

fn describe(msg: &Message<SimValue>) -> String {
    match msg {
        Message::Proposal(p) => format!(
            "{} vr={}",
            p.value.value_digest().short(),
            p.valid_round.map_or("-".to_string(), |r| r.to_string())
        ),
        Message::Vote(v) => v.value.map_or("nil".to_string(), |d| d.short()),
        Message::Decided { value, certificate, .. } => {
            format!("{} cert={}", value.value_digest().short(), certificate.len())
        }
    }
}

fn alternative(value: &SimValue) -> SimValue {
    SimValue { payload: value.payload ^ 0x5555_5555_5555_5555, ..*value }
}

fn emit(node: &mut Node, net: &mut Network<'_>, out: Output<SimValue>) -> io::Result<()> {
    let id = node.engine.id();
    for (t, delay) in out.timers {
        net.queue.schedule_in(delay, id, Event::Timer(t));
    }
    // Catch-up replies carry real certificates regardless of strategy.
    for (to, msg) in out.direct {
        if node.strategy != Some(ByzantineStrategy::Silent) {
            net.send(id, to, msg)?;
        }
    }
    match node.strategy {
        None => {
            for msg in &out.broadcast {
                net.broadcast(id, msg)?;
            }
        }
        Some(ByzantineStrategy::Silent) => {}
        Some(ByzantineStrategy::Equivocate) => {
            for msg in out.broadcast {
                let mut peers: Vec<ValidatorId> = net.validators.iter().copied().filter(|v| *v != id).collect();
                peers.shuffle(&mut net.rng);
                let twin = match &msg {
                    Message::Proposal(p) => Message::Proposal(Proposal { value: alternative(&p.value), ..p.clone() }),
                    Message::Vote(v) => {
                        let value = match v.value {
                            Some(_) => None,
                            None => Some(Digest::of(&net.rng.random::<u64>().to_le_bytes())),
                        };
                        Message::Vote(node.engine.keys().sign(Vote { value, ..*v }))
                    }
                    other => other.clone(),
                };
                let half = peers.len() / 2;
                for (i, to) in peers.into_iter().enumerate() {
                    net.send(id, to, if i < half { msg.clone() } else { twin.clone() })?;
                }
            }
        }
        Some(ByzantineStrategy::Conflicting) => {
            for msg in out.broadcast {
                if let Message::Proposal(p) = &msg {
                    net.broadcast(id, &msg)?;
                    let twin = Message::Proposal(Proposal { value: alternative(&p.value), ..p.clone() });
                    net.broadcast(id, &twin)?;
                }
            }
        }
    }
    Ok(())
}

impl Node {
    /// A conflicting voter answers every proposal with a prevote and a
    /// precommit for it, across all rounds and both values it sees.
    fn attack(&mut self, msg: &Message<SimValue>, net: &mut Network<'_>) -> io::Result<()> {
        let Message::Proposal(p) = msg else { return Ok(()) };
        let d = p.value.value_digest();
        if !self.attacked.insert((p.height, p.round, d)) {
            return Ok(());
        }
        let keys = self.engine.keys().clone();
        let id = self.engine.id();
        for kind in [VoteKind::Prevote, VoteKind::Precommit] {
            let v = keys.sign(Vote {
                height: p.height,
                round: p.round,
                kind,
                voter: id,
                value: Some(d),
                signature: Digest::ZERO,
            });
            net.broadcast(id, &Message::Vote(v))?;
        }
        Ok(())
    }
}

pub fn run_consensus_sim(cfg: &ConsensusSimConfig) -> ConsensusSimReport {
    run_consensus_sim_traced(cfg, None).expect("no trace writer, no io errors")
}

/// Runs the simulation, writing one line per sent message to `trace`.
pub fn run_consensus_sim_traced(
    cfg: &ConsensusSimConfig,
    trace: Option<&mut dyn Write>,
) -> io::Result<ConsensusSimReport> {
    let validators = cfg.validators();
    let keys = KeyRing::simulated(cfg.seed, &validators);
    let mut nodes: Vec<Node> = validators
        .iter()
        .map(|&id| Node {
            engine: Engine::new(EngineConfig {
                id,
                validators: validators.clone(),
                keys: keys.clone(),
                timeouts: cfg.timeouts.clone(),
                initial_height: 0,
                idle_until_woken: false,
            })
            .expect("valid validator set"),
            app: HonestApp { seed: cfg.seed, id, decided: Vec::new() },
            strategy: cfg.byzantine.get(&id).copied(),
            attacked: BTreeSet::new(),
        })
        .collect();
    let mut net = Network {
        queue: EventQueue::new(),
        rng: stream_rng(cfg.seed, &[stream::NETWORK]),
        latency: cfg.latency.clone(),
        validators: validators.clone(),
        sent: 0,
        trace,
    };
    for node in nodes.iter_mut() {
        let out = node.engine.start(&mut node.app);
        emit(node, &mut net, out)?;
    }
    let mut max_round = 0;
    let done = |nodes: &[Node]| {
        nodes.iter().filter(|n| n.strategy.is_none()).all(|n| n.app.decided.len() as u64 >= cfg.target_heights)
    };
    while let Some(ev) = net.queue.pop() {
        if ev.fire_at > cfg.max_time || done(&nodes) {
            break;
        }
        let node = &mut nodes[ev.target.0 as usize];
        let round_before = node.engine.round();
        let out = match ev.payload {
            Event::Timer(t) => node.engine.handle_timeout(&mut node.app, t),
            Event::Deliver { from, msg } => {
                if node.strategy == Some(ByzantineStrategy::Conflicting) {
                    node.attack(&msg, &mut net)?;
                }
                node.engine.handle_message(&mut node.app, from, msg)
            }
        };
        if node.strategy.is_none() && !out.decided.is_empty() {
            max_round = max_round.max(round_before);
        }
        emit(node, &mut net, out)?;
    }
    let decisions = nodes
        .iter()
        .filter(|n| n.strategy.is_none())
        .map(|n| (n.engine.id(), n.app.decided.clone()))
        .collect();
    let evidence = nodes.iter().filter(|n| n.strategy.is_none()).map(|n| n.engine.evidence().len()).sum();
    Ok(ConsensusSimReport { decisions, messages_sent: net.sent, evidence, end_time: net.queue.now(), max_round })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn honest_network_commits() {
        let cfg = ConsensusSimConfig {
            n: 4,
            byzantine: BTreeMap::new(),
            latency: LatencyModel { base: 5, jitter: 5, drop_prob: 0.0, gst: None },
            timeouts: TimeoutConfig::uniform(50),
            target_heights: 10,
            max_time: VirtualTime(1_000_000),
            seed: 1,
        };
        let r = run_consensus_sim(&cfg);
        assert_eq!(r.min_committed(), 10);
        assert_eq!(r.fork_height(), None);
        assert_eq!(r.max_round, 0);
    }

    #[test]
    fn adversarial_runs_are_safe_and_live() {
        for seed in 0..40 {
            for n in [4, 7] {
                let r = run_consensus_sim(&ConsensusSimConfig::randomized(n, seed, 6));
                assert_eq!(r.fork_height(), None, "n={n} seed={seed}");
                assert!(r.min_committed() >= 6, "n={n} seed={seed}: {}", r.min_committed());
            }
        }
    }

    #[test]
    fn reruns_are_identical_and_traceable() {
        let cfg = ConsensusSimConfig::randomized(4, 9, 3);
        let mut a = Vec::new();
        let ra = run_consensus_sim_traced(&cfg, Some(&mut a)).unwrap();
        let rb = run_consensus_sim(&cfg);
        assert_eq!(ra, rb);
        assert_eq!(a.iter().filter(|b| **b == b'\n').count() as u64, ra.messages_sent);
    }
}
