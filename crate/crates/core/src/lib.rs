//! Decentralized federated learning over a BFT-replicated ledger, with a
//! deterministic discrete-event simulator for running whole deployments.

pub mod aggregation;
pub mod codec;
pub mod ids;
pub mod learner;
pub mod ledger;
pub mod params;
pub mod reputation;
pub mod rng;
pub mod sync;
pub mod time;
pub mod validation;
pub mod consensus;
pub mod netsim;
pub mod node;
pub mod experiments;
