//! Deterministic discrete-event simulation of a whole deployment.

mod behavior;
mod config;
mod latency;
mod metrics;
mod queue;
mod run;

pub use behavior::{apply_noise, NodeBehavior, Profile, NOISE_PER_INDEX};
pub use config::{DataSource, ScoringConfig, SimConfig, Split, StopCondition};
pub use latency::{deliver, LatencyModel};
pub use metrics::{MetricsLog, MetricsRow};
pub use queue::{EventQueue, SimEvent};
pub use run::{load_data, run, RunOutcome, RunStats, Setup, SimError};
