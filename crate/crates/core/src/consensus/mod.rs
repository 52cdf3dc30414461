//! Two-phase BFT voting (propose, prevote, precommit) with value locking and
//! round changes on timeout.
//!
//! The engine is sans-IO: [`Engine::handle`] consumes one input and returns
//! the messages to send, the timers to arm and any value decided.

mod engine;
pub mod sim;

pub use engine::{ConsensusApp, Engine, EngineConfig, Evidence, Output, TimeoutConfig};

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::ids::ValidatorId;
use crate::params::Digest;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("validator set is empty")]
    EmptyValidatorSet,
    #[error("{0} is not in the validator set")]
    UnknownValidator(ValidatorId),
    #[error("duplicate validator {0}")]
    DuplicateValidator(ValidatorId),
}

/// Smallest number of validators strictly exceeding two thirds of `n`.
pub fn quorum_size(n: usize) -> Result<usize, ConsensusError> {
    if n == 0 {
        return Err(ConsensusError::EmptyValidatorSet);
    }
    Ok(2 * n / 3 + 1)
}

/// Maximum number of Byzantine validators tolerated by `n`.
pub fn max_faulty(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

/// Round-robin proposer rotation.
pub fn proposer_for<T: Copy>(height: u64, round: u64, validators: &[T]) -> T {
    assert!(!validators.is_empty(), "empty validator list");
    let n = validators.len() as u64;
    validators[((height % n + round % n) % n) as usize]
}

/// A value consensus can decide on.
pub trait ConsensusValue: Clone + Debug + PartialEq + Canonical {
    fn value_digest(&self) -> Digest {
        Digest::of(&self.to_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    Propose,
    Prevote,
    Precommit,
    Committed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VoteKind {
    Prevote,
    Precommit,
}

/// A signed vote for a value digest, or for nil.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vote {
    pub height: u64,
    pub round: u64,
    pub kind: VoteKind,
    pub voter: ValidatorId,
    pub value: Option<Digest>,
    pub signature: Digest,
}

impl Vote {
    fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_body(&mut enc);
        enc.finish()
    }

    fn encode_body(&self, enc: &mut Encoder) {
        enc.u64(self.height).u64(self.round);
        enc.u8(match self.kind {
            VoteKind::Prevote => 0,
            VoteKind::Precommit => 1,
        });
        enc.u32(self.voter.0);
        match &self.value {
            Some(d) => {
                enc.u8(1);
                d.encode(enc);
            }
            None => {
                enc.u8(0);
            }
        }
    }
}

/// Simulated signatures: each validator holds a secret key and signs with
/// SHA-256(key || message). The ring plays the role of a PKI that can check
/// any signature; nodes only ever sign with their own key.
#[derive(Clone, Debug)]
pub struct KeyRing {
    keys: Arc<BTreeMap<ValidatorId, [u8; 32]>>,
}

impl KeyRing {
    pub fn simulated(seed: u64, validators: &[ValidatorId]) -> Self {
        let keys = validators
            .iter()
            .map(|v| {
                let s = crate::rng::derive_seed(seed, &[crate::rng::stream::BYZANTINE, 0x006b_6579, v.0 as u64]);
                (*v, Digest::of(&s.to_le_bytes()).0)
            })
            .collect();
        Self { keys: Arc::new(keys) }
    }

    fn tag(key: &[u8; 32], bytes: &[u8]) -> Digest {
        let mut buf = Vec::with_capacity(32 + bytes.len());
        buf.extend_from_slice(key);
        buf.extend_from_slice(bytes);
        Digest::of(&buf)
    }

    /// Fills in `vote.signature` with the voter's key.
    pub fn sign(&self, mut vote: Vote) -> Vote {
        vote.signature = self.keys.get(&vote.voter).map_or(Digest::ZERO, |k| Self::tag(k, &vote.signing_bytes()));
        vote
    }

    pub fn verify(&self, vote: &Vote) -> bool {
        self.keys.get(&vote.voter).is_some_and(|k| Self::tag(k, &vote.signing_bytes()) == vote.signature)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal<V> {
    pub height: u64,
    pub round: u64,
    pub value: V,
    /// Round in which the value gathered a prevote quorum, if re-proposed.
    pub valid_round: Option<u64>,
    pub proposer: ValidatorId,
    /// The signed prevotes from `valid_round`, so peers that missed them can
    /// check the claim.
    pub lock_proof: Vec<Vote>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message<V> {
    Proposal(Proposal<V>),
    Vote(Vote),
    /// A value the sender has decided, with the precommit quorum that
    /// decided it, sent to peers that are behind.
    Decided { height: u64, value: V, certificate: Vec<Vote> },
}

impl<V> Message<V> {
    pub fn height(&self) -> u64 {
        match self {
            Message::Proposal(p) => p.height,
            Message::Vote(v) => v.height,
            Message::Decided { height, .. } => *height,
        }
    }

    pub fn round(&self) -> Option<u64> {
        match self {
            Message::Proposal(p) => Some(p.round),
            Message::Vote(v) => Some(v.round),
            Message::Decided { .. } => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Message::Proposal(_) => "proposal",
            Message::Vote(Vote { kind: VoteKind::Prevote, .. }) => "prevote",
            Message::Vote(Vote { kind: VoteKind::Precommit, .. }) => "precommit",
            Message::Decided { .. } => "decided",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timeout {
    pub height: u64,
    pub round: u64,
    pub step: Step,
}

fn encode_opt_u64(enc: &mut Encoder, v: Option<u64>) {
    match v {
        Some(x) => enc.u8(1).u64(x),
        None => enc.u8(0),
    };
}

impl Canonical for Vote {
    fn encode(&self, enc: &mut Encoder) {
        self.encode_body(enc);
        self.signature.encode(enc);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let height = dec.u64()?;
        let round = dec.u64()?;
        let kind = match dec.u8()? {
            0 => VoteKind::Prevote,
            1 => VoteKind::Precommit,
            t => return Err(dec.tag_error("vote kind", t)),
        };
        let voter = ValidatorId(dec.u32()?);
        let value = match dec.u8()? {
            0 => None,
            1 => Some(Digest::decode(dec)?),
            t => return Err(dec.tag_error("vote value", t)),
        };
        let signature = Digest::decode(dec)?;
        Ok(Self { height, round, kind, voter, value, signature })
    }
}

impl<V: Canonical> Canonical for Message<V> {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Message::Proposal(p) => {
                enc.u8(0).u64(p.height).u64(p.round);
                encode_opt_u64(enc, p.valid_round);
                enc.u32(p.proposer.0);
                p.value.encode(enc);
                enc.len(p.lock_proof.len());
                for v in &p.lock_proof {
                    v.encode(enc);
                }
            }
            Message::Vote(v) => {
                enc.u8(1);
                v.encode(enc);
            }
            Message::Decided { height, value, certificate } => {
                enc.u8(2).u64(*height);
                value.encode(enc);
                enc.len(certificate.len());
                for v in certificate {
                    v.encode(enc);
                }
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match dec.u8()? {
            0 => {
                let height = dec.u64()?;
                let round = dec.u64()?;
                let valid_round = match dec.u8()? {
                    0 => None,
                    1 => Some(dec.u64()?),
                    t => return Err(dec.tag_error("valid round", t)),
                };
                let proposer = ValidatorId(dec.u32()?);
                let value = V::decode(dec)?;
                let n = dec.seq_len()?;
                let lock_proof = (0..n).map(|_| Vote::decode(dec)).collect::<Result<_, _>>()?;
                Message::Proposal(Proposal { height, round, value, valid_round, proposer, lock_proof })
            }
            1 => Message::Vote(Vote::decode(dec)?),
            2 => {
                let height = dec.u64()?;
                let value = V::decode(dec)?;
                let n = dec.seq_len()?;
                let certificate = (0..n).map(|_| Vote::decode(dec)).collect::<Result<_, _>>()?;
                Message::Decided { height, value, certificate }
            }
            t => return Err(dec.tag_error("consensus message", t)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quorum_sizes() {
        assert_eq!(quorum_size(0), Err(ConsensusError::EmptyValidatorSet));
        assert_eq!(quorum_size(1), Ok(1));
        assert_eq!(quorum_size(3), Ok(3));
        assert_eq!(quorum_size(4), Ok(3));
        assert_eq!(quorum_size(7), Ok(5));
        assert_eq!(quorum_size(10), Ok(7));
        for n in 1..200usize {
            let q = quorum_size(n).unwrap();
            assert!(3 * q > 2 * n && 3 * (q - 1) <= 2 * n);
        }
    }

    #[test]
    fn proposer_rotation() {
        let vs = ['A', 'B', 'C'];
        assert_eq!(proposer_for(0, 0, &vs), 'A');
        assert_eq!(proposer_for(0, 1, &vs), 'B');
        assert_eq!(proposer_for(5, 0, &vs), 'C');
        // u64::MAX is divisible by 3.
        assert_eq!(proposer_for(u64::MAX, u64::MAX, &vs), 'A');
    }

    #[test]
    fn vote_round_trip() {
        let ring = KeyRing::simulated(7, &[ValidatorId(1), ValidatorId(2)]);
        let v = ring.sign(Vote {
            height: 3,
            round: 1,
            kind: VoteKind::Precommit,
            voter: ValidatorId(2),
            value: Some(Digest::of(b"x")),
            signature: Digest::ZERO,
        });
        assert_eq!(Vote::from_bytes(&v.to_bytes()).unwrap(), v);
        let nil = ring.sign(Vote { value: None, kind: VoteKind::Prevote, ..v });
        assert_eq!(Vote::from_bytes(&nil.to_bytes()).unwrap(), nil);
    }

    #[test]
    fn signatures_bind_voter_and_content() {
        let ring = KeyRing::simulated(7, &[ValidatorId(1), ValidatorId(2)]);
        let v = ring.sign(Vote {
            height: 3,
            round: 1,
            kind: VoteKind::Precommit,
            voter: ValidatorId(2),
            value: None,
            signature: Digest::ZERO,
        });
        assert!(ring.verify(&v));
        assert!(!ring.verify(&Vote { voter: ValidatorId(1), ..v }));
        assert!(!ring.verify(&Vote { round: 2, ..v }));
        assert!(!ring.verify(&Vote { voter: ValidatorId(9), ..v }));
    }
}
