use thiserror::Error;

use super::{deliver, EventQueue, MetricsLog, MetricsRow, Profile, SimConfig, StopCondition};
use super::config::DataSource;
use crate::consensus::{KeyRing, TimeoutConfig};
use crate::ids::{NodeId, TrainerId, ValidatorId};
use crate::learner::{generate_synthetic_with, load_idx, Dataset, Learner, LearnerError, ModelSpec};
use crate::ledger::{Block, Chain, GenesisSpec, LedgerError, StateStore};
use crate::node::{Msg, NodeError, NodeTimer, Outbound, TrainerNode, ValidatorNode, ValidatorSetup};
use crate::params::ModelVersion;
use crate::rng::{derive_seed, stream, stream_rng};
use crate::time::VirtualTime;
use crate::validation::{UpdateValidator, ValidatorConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("deadlock at {at}: no pending events; {waiting}")]
    Deadlock { at: VirtualTime, waiting: String },
    #[error("virtual time cap {at} reached before the stop condition; {waiting}")]
    TimeCap { at: VirtualTime, waiting: String },
    #[error("honest validators {a} and {b} disagree at height {height}")]
    Fork { a: ValidatorId, b: ValidatorId, height: u64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub events: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub end_time: VirtualTime,
    /// Consensus misbehavior recorded by honest validators.
    pub evidence: usize,
    /// Messages and blocks refused by honest validators, with reasons.
    pub refusals: Vec<String>,
    pub submissions: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: MetricsLog,
    /// The observer validator's chain.
    pub chain: Vec<Block>,
    pub stats: RunStats,
}

#[derive(Clone, Debug)]
enum Payload {
    Deliver { from: NodeId, msg: Msg },
    Timer(NodeTimer),
}

/// Everything a run needs that is derived from the config before the first event.
pub struct Setup {
    pub spec: ModelSpec,
    pub learner: Learner,
    pub test: Dataset,
    pub trainer_shards: Vec<Dataset>,
    pub validator_shards: Vec<Dataset>,
    pub genesis_model: ModelVersion,
}

pub fn load_data(source: &DataSource, seed: u64) -> Result<Dataset, LearnerError> {
    match source {
        DataSource::Synthetic(s) => generate_synthetic_with(seed, s),
        DataSource::Idx { images, labels } => load_idx(images, labels),
    }
}

impl Setup {
    pub fn new(cfg: &SimConfig) -> Result<Self, SimError> {
        cfg.validate().map_err(SimError::Config)?;
        let data = load_data(&cfg.data, cfg.seed)?;
        let mut sizes = vec![cfg.split.test];
        sizes.extend(std::iter::repeat_n(cfg.split.trainer_shard, cfg.n_trainers));
        sizes.extend(std::iter::repeat_n(cfg.split.validator_shard, cfg.n_validators));
        let mut parts = data.partition(&sizes, cfg.seed)?.into_iter();
        let test = parts.next().expect("test part");
        let trainer_shards: Vec<_> = parts.by_ref().take(cfg.n_trainers).collect();
        let validator_shards: Vec<_> = parts.collect();
        let spec = ModelSpec::for_dataset(cfg.learner.model_arch, &data);
        let mut lc = cfg.learner.clone();
        lc.seed = derive_seed(cfg.seed, &[stream::SGD, cfg.learner.seed]);
        let learner = Learner::new(spec, lc)?;
        let genesis_model = ModelVersion::new(0, spec.init(cfg.seed));
        Ok(Self { spec, learner, test, trainer_shards, validator_shards, genesis_model })
    }

    /// SGD steps in one training job of a trainer with the given shard.
    pub fn job_steps(&self, cfg: &SimConfig, shard: &Dataset) -> u64 {
        cfg.epochs_per_job * self.learner.steps_per_epoch(shard.len())
    }
}

struct World<'a> {
    cfg: &'a SimConfig,
    setup: Setup,
    trainers: Vec<TrainerNode>,
    validators: Vec<ValidatorNode>,
    queue: EventQueue<NodeId, Payload>,
    net: rand_chacha::ChaCha8Rng,
    observer: usize,
    metrics: MetricsLog,
    stats: RunStats,
}

pub fn run(cfg: &SimConfig) -> Result<RunOutcome, SimError> {
    let setup = Setup::new(cfg)?;
    let nv = cfg.n_validators;
    let validator_ids: Vec<ValidatorId> = (0..nv as u32).map(ValidatorId).collect();
    let trainer_ids: Vec<TrainerId> = (0..cfg.n_trainers as u32).map(TrainerId).collect();
    let genesis = Chain::genesis_block(
        GenesisSpec { model: setup.genesis_model.clone(), trainers: trainer_ids.clone(), scoring: cfg.scoring.enabled },
        VirtualTime::ZERO,
        cfg.sync.deadline_from(VirtualTime::ZERO),
        validator_ids[0],
    )?;
    let keys = KeyRing::simulated(cfg.seed, &validator_ids);
    let mut validators = Vec::with_capacity(nv);
    for (i, v) in validator_ids.iter().enumerate() {
        let config = ValidatorConfig::new(setup.validator_shards[i].clone(), cfg.scoring.tolerance)
            .map_err(|e| SimError::Config(e.to_string()))?;
        validators.push(ValidatorNode::new(ValidatorSetup {
            id: *v,
            behavior: cfg.validator_behavior(i),
            validators: validator_ids.clone(),
            trainers: trainer_ids.iter().copied().filter(|t| t.0 as usize % nv == i).collect(),
            genesis: genesis.clone(),
            validator: UpdateValidator::new(setup.spec, config),
            policy: cfg.sync.clone(),
            eta: cfg.scoring.eta,
            keys: keys.clone(),
            timeouts: TimeoutConfig::uniform(cfg.consensus_timeout),
        })?);
    }
    let trainers = trainer_ids
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let shard = setup.trainer_shards[i].clone();
            let steps = setup.job_steps(cfg, &shard);
            TrainerNode::new(
                *t,
                validator_ids[i % nv],
                cfg.trainer_behavior(i),
                shard,
                setup.learner.clone(),
                cfg.sync.clone(),
                steps,
                cfg.step_time,
                cfg.seed,
            )
        })
        .collect();
    let observer = (0..nv).find(|&i| cfg.validator_behavior(i).profile != Profile::Equivocator).unwrap_or(0);
    let world = World {
        cfg,
        setup,
        trainers,
        validators,
        queue: EventQueue::new(),
        net: stream_rng(cfg.seed, &[stream::NETWORK]),
        observer,
        metrics: MetricsLog::new(cfg.n_trainers),
        stats: RunStats::default(),
    };
    world.run()
}

impl World<'_> {
    fn run(mut self) -> Result<RunOutcome, SimError> {
        let genesis_state = self.validators[self.observer].chain().state().clone();
        self.record_row(0, &genesis_state, VirtualTime::ZERO)?;
        for i in 0..self.validators.len() {
            let out = self.validators[i].start(VirtualTime::ZERO);
            self.dispatch(NodeId::Validator(ValidatorId(i as u32)), out);
        }
        loop {
            if let StopCondition::Rounds(k) = self.cfg.stop {
                if self.metrics.rounds_completed() >= k {
                    self.metrics.rows.truncate(k as usize + 1);
                    break;
                }
            }
            let Some(next) = self.queue.peek_time() else {
                if let StopCondition::VirtualTime(_) = self.cfg.stop {
                    break;
                }
                return Err(SimError::Deadlock { at: self.queue.now(), waiting: self.describe_wait() });
            };
            if let StopCondition::VirtualTime(d) = self.cfg.stop {
                if next > d {
                    break;
                }
            }
            if next > self.cfg.max_virtual_time {
                return Err(SimError::TimeCap { at: self.cfg.max_virtual_time, waiting: self.describe_wait() });
            }
            let ev = self.queue.pop().expect("peeked");
            self.stats.events += 1;
            self.step(ev.target, ev.payload)?;
        }
        self.finish()
    }

    fn step(&mut self, target: NodeId, payload: Payload) -> Result<(), SimError> {
        let now = self.queue.now();
        let out = match (target, payload) {
            (NodeId::Trainer(t), Payload::Deliver { from, msg }) => self.trainers[t.0 as usize].handle(from, msg)?,
            (NodeId::Trainer(t), Payload::Timer(NodeTimer::JobDone { job })) => {
                self.trainers[t.0 as usize].on_job_done(job)?
            }
            (NodeId::Trainer(_), Payload::Timer(_)) => Vec::new(),
            (NodeId::Validator(v), Payload::Deliver { from, msg }) => {
                self.validators[v.0 as usize].handle(now, from, msg)?
            }
            (NodeId::Validator(v), Payload::Timer(t)) => self.validators[v.0 as usize].on_timer(now, t)?,
        };
        self.dispatch(target, out);
        if target == NodeId::Validator(ValidatorId(self.observer as u32)) {
            for (round, height, at) in self.validators[self.observer].drain_closed() {
                let chain = self.validators[self.observer].chain();
                let state = if height == chain.height() { chain.state().clone() } else { chain.state_at(height)? };
                self.record_row(round + 1, &state, at)?;
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, from: NodeId, out: Vec<Outbound>) {
        let now = self.queue.now();
        for o in out {
            match o {
                Outbound::Timer { after, timer } => {
                    self.queue.schedule(now + after, from, Payload::Timer(timer));
                }
                Outbound::Send { to, msg } => {
                    self.stats.messages_sent += 1;
                    match deliver(&self.cfg.latency, &mut self.net, now) {
                        Some(at) => {
                            self.queue.schedule(at, to, Payload::Deliver { from, msg });
                        }
                        None => self.stats.messages_dropped += 1,
                    }
                }
            }
        }
    }

    fn record_row(&mut self, round: u64, state: &StateStore, at: VirtualTime) -> Result<(), SimError> {
        let accuracy = self.setup.learner.evaluate(&state.current_model.params, &self.setup.test)?;
        let phi = state.trust.phi_vector().into_iter().map(|(_, p)| p).collect();
        self.metrics.push(MetricsRow {
            round,
            virtual_time: at,
            version: state.current_model.version,
            accuracy,
            phi,
            msgs_sent: self.stats.messages_sent,
        });
        Ok(())
    }

    fn describe_wait(&self) -> String {
        let v = &self.validators[self.observer];
        let rs = v.replica().local_round();
        let e = v.engine();
        let training = self.trainers.iter().filter(|t| t.training()).count();
        format!(
            "observer {} waits in round {} with {}/{} submissions (close decision {:?}); consensus at height {} round {} step {:?}; {} trainers training",
            v.id,
            rs.round_id,
            rs.submitted.len(),
            rs.total_trainers,
            v.replica().close_decision(),
            e.height(),
            e.round(),
            e.step(),
            training,
        )
    }

    fn finish(mut self) -> Result<RunOutcome, SimError> {
        let honest: Vec<usize> = (0..self.validators.len())
            .filter(|&i| self.cfg.validator_behavior(i).profile != Profile::Equivocator)
            .collect();
        let reference = self.validators[self.observer].chain();
        for &i in &honest {
            let other = self.validators[i].chain();
            let common = reference.height().min(other.height());
            for h in 0..=common {
                if reference.block(h).map(Block::digest) != other.block(h).map(Block::digest) {
                    return Err(SimError::Fork { a: ValidatorId(self.observer as u32), b: ValidatorId(i as u32), height: h });
                }
            }
        }
        for &i in &honest {
            let v = &self.validators[i];
            self.stats.evidence += v.engine().evidence().len();
            self.stats.refusals.extend(v.replica().log.iter().map(|l| format!("{}: {l}", v.id)));
        }
        self.stats.end_time = self.queue.now();
        self.stats.submissions = self.trainers.iter().map(|t| t.submissions).collect();
        Ok(RunOutcome {
            metrics: self.metrics,
            chain: self.validators[self.observer].chain().blocks().to_vec(),
            stats: self.stats,
        })
    }
}
