//! The replicated ledger: an append-only chain of blocks whose transactions
//! fold into the materialized [`StateStore`].

mod chain;
mod state;
mod tx;

pub use chain::{
    decode_chain, encode_chain, read_chain_file, verify_chain, verify_chain_bytes, write_chain_file, Block, Chain,
    ChainFileError, ChainVerification, RecordError, CHAIN_FILE_MAGIC,
};
pub use state::{execute_block, query, QueryKey, QueryValue, StateStore};
pub use tx::{GenesisSpec, RoundAction, Transaction, TxKind};

use thiserror::Error;

use crate::aggregation::AggregationError;
use crate::codec::DecodeError;
use crate::ids::TrainerId;
use crate::params::{Digest, ParamsError};
use crate::reputation::ReputationError;
use crate::sync::SyncError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("block height {actual} does not follow {expected}")]
    HeightMismatch { expected: u64, actual: u64 },
    #[error("prev_hash {actual:?} does not link to {expected:?}")]
    BrokenLink { expected: Digest, actual: Digest },
    #[error("transaction {index} payload digest mismatch")]
    TxDigestMismatch { index: usize },
    #[error("state hash mismatch: block claims {claimed:?}, execution gives {computed:?}")]
    StateHashMismatch { claimed: Digest, computed: Digest },
    #[error("genesis block must be first and only at height 0")]
    MisplacedGenesis,
    #[error("missing genesis block")]
    MissingGenesis,
    #[error("transaction {index}: {reason}")]
    InvalidTx { index: usize, reason: String },
    #[error("update from {trainer} for version {update_version}, current is {current_version}")]
    StaleUpdate { trainer: TrainerId, update_version: u64, current_version: u64 },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Reputation(#[from] ReputationError),
    #[error(transparent)]
    Sync(#[from] SyncError),
}
