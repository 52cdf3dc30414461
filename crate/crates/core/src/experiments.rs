//! Scripted experiment suites over the simulator: centralized-vs-federated
//! benchmark, trainer/validator ratio sweep, trust scoring with noisy
//! trainers, and the synchronization-scheme comparison.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::ledger::{write_chain_file, Block, ChainFileError};
use crate::learner::{LearnerConfig, ModelArch, SyntheticSpec};
use crate::netsim::{
    run, DataSource, LatencyModel, MetricsLog, MetricsRow, NodeBehavior, ScoringConfig, SimConfig, SimError, Setup,
    Split, StopCondition,
};
use crate::sync::SyncPolicy;
use crate::time::{Ticks, VirtualTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    Benchmark,
    RatioSweep,
    Scoring,
    SyncSchemes,
}

impl Experiment {
    pub const ALL: [Experiment; 4] =
        [Experiment::Benchmark, Experiment::RatioSweep, Experiment::Scoring, Experiment::SyncSchemes];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Benchmark => "benchmark",
            Experiment::RatioSweep => "ratio_sweep",
            Experiment::Scoring => "scoring",
            Experiment::SyncSchemes => "sync_schemes",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment {s:?} (expected benchmark, ratio_sweep, scoring or sync_schemes)"))
    }
}

/// An experiment: a base configuration and the seeds to run it under. The
/// individual runs differ from `base` only in the experiment's overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: Experiment,
    pub base: SimConfig,
    pub seeds: Vec<u64>,
    /// Rounds (or centralized iterations) per run.
    pub rounds: u64,
    /// Centralized benchmark: local epochs per iteration.
    pub central_epochs: u64,
    /// Ratio sweep: total number of nodes.
    pub total_nodes: usize,
    /// Sync comparison: duration of the fixed-time runs.
    pub fixed_time: VirtualTime,
    /// Sync comparison: per-trainer pace multipliers.
    pub paces: Vec<f64>,
    /// Sync comparison: extra steps a finished trainer may take during an
    /// SSP extension.
    pub extension_steps: u64,
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn base_config() -> SimConfig {
    SimConfig {
        seed: 0,
        n_trainers: 6,
        n_validators: 3,
        stop: StopCondition::Rounds(30),
        data: DataSource::Synthetic(SyntheticSpec { samples: 8000, features: 50, classes: 10, class_sep: 0.4, noise: 1.0 }),
        split: Split { test: 2000, trainer_shard: 400, validator_shard: 300 },
        learner: LearnerConfig { learning_rate: 0.05, batch_size: 20, l2: 0.01, ..LearnerConfig::default() },
        epochs_per_job: 1,
        step_time: 10,
        sync: SyncPolicy::bap(1.0),
        scoring: ScoringConfig { enabled: false, eta: 10.0, tolerance: 1.0 },
        latency: LatencyModel { base: 2, jitter: 3, drop_prob: 0.0, gst: None },
        consensus_timeout: 100,
        trainers: Vec::new(),
        validators: Vec::new(),
        max_virtual_time: VirtualTime(50_000_000),
    }
}

impl ExperimentSpec {
    pub fn default_for(name: Experiment) -> Self {
        let mut spec = Self {
            name,
            base: base_config(),
            seeds: DEFAULT_SEEDS.to_vec(),
            rounds: 30,
            central_epochs: 7,
            total_nodes: 10,
            fixed_time: VirtualTime(0),
            paces: Vec::new(),
            extension_steps: 0,
        };
        match name {
            Experiment::Benchmark => {
                spec.base.n_trainers = 7;
                spec.base.n_validators = 3;
            }
            Experiment::RatioSweep => {
                spec.base.split = Split { test: 2000, trainer_shard: 60, validator_shard: 200 };
            }
            Experiment::Scoring => {
                spec.base.scoring = ScoringConfig { enabled: true, eta: 10.0, tolerance: 1.0 };
            }
            Experiment::SyncSchemes => {
                // A linear model on Gaussian clusters is near its best after a
                // few steps, which hides how much each scheme trains.
                spec.base.learner.model_arch = ModelArch::OneHiddenMlp { hidden: 32 };
                spec.base.learner.learning_rate = 0.01;
                spec.paces = vec![1.0, 1.2, 1.4, 1.6, 1.8, 3.0];
                // Base job: 20 steps of 10 ticks. Four trainers beat the
                // deadline, the pace-1.8 one makes it inside the SSP extension
                // and the slowest misses both.
                spec.base.sync = SyncPolicy::bsp(340);
                spec.extension_steps = 8;
                spec.fixed_time = VirtualTime(12_000);
            }
        }
        spec
    }

    fn with_seed(&self, seed: u64) -> SimConfig {
        SimConfig { seed, stop: StopCondition::Rounds(self.rounds), ..self.base.clone() }
    }
}

/// One simulation (or centralized loop) inside an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub metrics: MetricsLog,
    /// Empty for the centralized loop.
    pub chain: Vec<Block>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub name: Experiment,
    pub runs: Vec<RunRecord>,
    pub summary: Table,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Chain(#[from] ChainFileError),
}

impl ExperimentReport {
    pub fn run(&self, run_id: &str, seed: u64) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.run_id == run_id && r.seed == seed)
    }

    pub fn run_file_stem(r: &RunRecord) -> String {
        format!("{}_seed{}", r.run_id, r.seed)
    }

    /// Writes `<run>_seed<s>.csv` per run, `<run>_seed<s>.chain` for each
    /// simulated run, and `summary.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| ReportError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        for r in &self.runs {
            let stem = Self::run_file_stem(r);
            let csv = dir.join(format!("{stem}.csv"));
            std::fs::write(&csv, r.metrics.to_csv()).map_err(io(&csv))?;
            if !r.chain.is_empty() {
                write_chain_file(&dir.join(format!("{stem}.chain")), &r.chain)?;
            }
        }
        let summary = dir.join("summary.csv");
        std::fs::write(&summary, self.summary.to_csv()).map_err(io(&summary))
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

struct Job {
    run_id: String,
    cfg: SimConfig,
}

fn run_jobs(jobs: Vec<Job>) -> Result<Vec<RunRecord>, SimError> {
    jobs.into_par_iter()
        .map(|j| {
            let out = run(&j.cfg)?;
            Ok(RunRecord { run_id: j.run_id, seed: j.cfg.seed, metrics: out.metrics, chain: out.chain })
        })
        .collect()
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, SimError> {
    if spec.seeds.is_empty() {
        return Err(SimError::Config("experiment needs at least one seed".into()));
    }
    match spec.name {
        Experiment::Benchmark => run_benchmark(spec),
        Experiment::RatioSweep => run_ratio_sweep(spec),
        Experiment::Scoring => run_scoring(spec),
        Experiment::SyncSchemes => run_sync_schemes(spec),
    }
}

/// The single-learner baseline: the union of the trainer shards trained for
/// `central_epochs` epochs per iteration, evaluated on the same test set.
pub fn centralized(cfg: &SimConfig, iterations: u64, epochs: u64) -> Result<MetricsLog, SimError> {
    let setup = Setup::new(cfg)?;
    let mut rows = Vec::new();
    let mut union = setup.trainer_shards[0].clone();
    for s in &setup.trainer_shards[1..] {
        union = union.concat(s)?;
    }
    let steps = epochs * setup.learner.steps_per_epoch(union.len());
    let mut params = setup.genesis_model.params.clone();
    let mut log = MetricsLog::new(0);
    for it in 0..=iterations {
        if it > 0 {
            let delta = setup.learner.sgd_delta(&params, &union, steps, &[u64::MAX, it])?;
            params = params.add(&delta).map_err(crate::learner::LearnerError::from)?;
        }
        let accuracy = setup.learner.evaluate(&params, &setup.test)?;
        rows.push(MetricsRow { round: it, virtual_time: VirtualTime(0), version: it, accuracy, phi: Vec::new(), msgs_sent: 0 });
    }
    log.rows = rows;
    Ok(log)
}

pub fn run_benchmark(spec: &ExperimentSpec) -> Result<ExperimentReport, SimError> {
    let central: Vec<RunRecord> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let metrics = centralized(&spec.with_seed(seed), spec.rounds, spec.central_epochs)?;
            Ok(RunRecord { run_id: "centralized".into(), seed, metrics, chain: Vec::new() })
        })
        .collect::<Result<_, SimError>>()?;
    let label = format!("decentralized_{}t{}v", spec.base.n_trainers, spec.base.n_validators);
    let fed = run_jobs(spec.seeds.iter().map(|&s| Job { run_id: label.clone(), cfg: spec.with_seed(s) }).collect())?;
    let mut summary = Table::new(&["seed", "centralized_final", "decentralized_final", "gap"]);
    let mut gaps = Vec::new();
    for (c, d) in central.iter().zip(&fed) {
        let gap = c.metrics.final_accuracy() - d.metrics.final_accuracy();
        gaps.push(gap);
        summary.push(vec![
            c.seed.to_string(),
            c.metrics.final_accuracy().to_string(),
            d.metrics.final_accuracy().to_string(),
            gap.to_string(),
        ]);
    }
    let med = |rs: &[RunRecord]| median(&rs.iter().map(|r| r.metrics.final_accuracy()).collect::<Vec<_>>());
    summary.push(vec!["median".into(), med(&central).to_string(), med(&fed).to_string(), median(&gaps).to_string()]);
    let mut runs = central;
    runs.extend(fed);
    Ok(ExperimentReport { name: spec.name, runs, summary })
}

pub fn ratio_split_label(trainers: usize, validators: usize) -> String {
    format!("split_{trainers}t{validators}v")
}

pub fn run_ratio_sweep(spec: &ExperimentSpec) -> Result<ExperimentReport, SimError> {
    let n = spec.total_nodes;
    if n < 2 {
        return Err(SimError::Config("ratio sweep needs at least 2 nodes".into()));
    }
    let mut jobs = Vec::new();
    for t in 1..n {
        for &seed in &spec.seeds {
            let mut cfg = spec.with_seed(seed);
            cfg.n_trainers = t;
            cfg.n_validators = n - t;
            cfg.trainers.truncate(t);
            cfg.validators.truncate(n - t);
            jobs.push(Job { run_id: ratio_split_label(t, n - t), cfg });
        }
    }
    let runs = run_jobs(jobs)?;
    let mut summary = Table::new(&["trainers", "validators", "seed", "max_accuracy", "argmax_round"]);
    for t in 1..n {
        let label = ratio_split_label(t, n - t);
        let mut maxes = Vec::new();
        for r in runs.iter().filter(|r| r.run_id == label) {
            let (acc, at) = r.metrics.max_accuracy();
            maxes.push(acc);
            summary.push(vec![t.to_string(), (n - t).to_string(), r.seed.to_string(), acc.to_string(), at.to_string()]);
        }
        summary.push(vec![t.to_string(), (n - t).to_string(), "median".into(), median(&maxes).to_string(), String::new()]);
    }
    Ok(ExperimentReport { name: spec.name, runs, summary })
}

/// First round from which a trainer's share stays at zero.
pub fn zero_from(log: &MetricsLog, trainer: usize) -> Option<u64> {
    let last_nonzero = log.rows.iter().rposition(|r| r.phi[trainer] != 0.0);
    match last_nonzero {
        None => log.rows.first().map(|r| r.round),
        Some(i) => log.rows.get(i + 1).map(|r| r.round),
    }
}

pub fn run_scoring(spec: &ExperimentSpec) -> Result<ExperimentReport, SimError> {
    let mut jobs = Vec::new();
    for &seed in &spec.seeds {
        for enabled in [true, false] {
            let mut cfg = spec.with_seed(seed);
            cfg.trainers = (0..cfg.n_trainers).map(NodeBehavior::indexed_noise).collect();
            cfg.scoring.enabled = enabled;
            jobs.push(Job { run_id: if enabled { "scoring" } else { "uniform" }.into(), cfg });
        }
    }
    let runs = run_jobs(jobs)?;
    let nt = spec.base.n_trainers;
    let mut header = vec!["seed".to_string(), "run".into(), "final_accuracy".into()];
    header.extend((0..nt).map(|i| format!("phi_{i}_final")));
    header.extend((0..nt).map(|i| format!("phi_{i}_zero_from")));
    let mut summary = Table { header, rows: Vec::new() };
    for r in &runs {
        let last = r.metrics.rows.last().expect("genesis row");
        let mut row = vec![r.seed.to_string(), r.run_id.clone(), last.accuracy.to_string()];
        row.extend(last.phi.iter().map(f64::to_string));
        row.extend((0..nt).map(|i| zero_from(&r.metrics, i).map_or(String::new(), |z| z.to_string())));
        summary.push(row);
    }
    Ok(ExperimentReport { name: spec.name, runs, summary })
}

/// The four compared policies: BSP, SSP, BAP with full and 0.6 majority.
pub fn sync_policies(period: Ticks, extension_steps: u64) -> Vec<SyncPolicy> {
    vec![SyncPolicy::bsp(period), SyncPolicy::ssp(period, extension_steps), SyncPolicy::bap(1.0), SyncPolicy::bap(0.6)]
}

pub fn sync_run_label(mode: &str, policy: &SyncPolicy) -> String {
    format!("{mode}_{}", policy.label())
}

pub fn run_sync_schemes(spec: &ExperimentSpec) -> Result<ExperimentReport, SimError> {
    let policies = sync_policies(spec.base.sync.period, spec.extension_steps);
    let mut jobs = Vec::new();
    for p in &policies {
        for &seed in &spec.seeds {
            for mode in ["fixed_rounds", "fixed_time"] {
                let mut cfg = spec.with_seed(seed);
                cfg.sync = p.clone();
                cfg.trainers = spec.paces.iter().map(|&pace| NodeBehavior::honest(pace)).collect();
                if mode == "fixed_time" {
                    cfg.stop = StopCondition::VirtualTime(spec.fixed_time);
                }
                jobs.push(Job { run_id: sync_run_label(mode, p), cfg });
            }
        }
    }
    let runs = run_jobs(jobs)?;
    let mut summary = Table::new(&["mode", "scheme", "seed", "rounds_completed", "final_accuracy"]);
    for mode in ["fixed_rounds", "fixed_time"] {
        for p in &policies {
            let label = sync_run_label(mode, p);
            let (mut rounds, mut accs) = (Vec::new(), Vec::new());
            for r in runs.iter().filter(|r| r.run_id == label) {
                rounds.push(r.metrics.rounds_completed() as f64);
                accs.push(r.metrics.final_accuracy());
                summary.push(vec![
                    mode.into(),
                    p.label(),
                    r.seed.to_string(),
                    r.metrics.rounds_completed().to_string(),
                    r.metrics.final_accuracy().to_string(),
                ]);
            }
            summary.push(vec![
                mode.into(),
                p.label(),
                "median".into(),
                median(&rounds).to_string(),
                median(&accs).to_string(),
            ]);
        }
    }
    Ok(ExperimentReport { name: spec.name, runs, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("asp".parse::<Experiment>().is_err());
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn zero_from_finds_the_absorbing_round() {
        let mut log = MetricsLog::new(2);
        for (round, phi) in [(0, [0.5, 0.5]), (1, [0.8, 0.2]), (2, [1.0, 0.0]), (3, [1.0, 0.0])] {
            log.push(MetricsRow { round, virtual_time: VirtualTime(0), version: round, accuracy: 0.0, phi: phi.to_vec(), msgs_sent: 0 });
        }
        assert_eq!(zero_from(&log, 1), Some(2));
        assert_eq!(zero_from(&log, 0), None);
    }
}
