//! Node identities.
//!
//! Identities are simulated: a node id is authenticated by the transport
//! rather than by a signature.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Index of a trainer within its subnetwork.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrainerId(pub u32);

/// Index of a validator within its subnetwork.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ValidatorId(pub u32);

impl fmt::Display for TrainerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

impl fmt::Display for ValidatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V{}", self.0)
    }
}

/// Any participant in a simulation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Trainer(TrainerId),
    Validator(ValidatorId),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Trainer(t) => t.fmt(f),
            NodeId::Validator(v) => v.fmt(f),
        }
    }
}

impl From<TrainerId> for NodeId {
    fn from(id: TrainerId) -> Self {
        NodeId::Trainer(id)
    }
}

impl From<ValidatorId> for NodeId {
    fn from(id: ValidatorId) -> Self {
        NodeId::Validator(id)
    }
}
