use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::ids::{NodeId, TrainerId, ValidatorId};
use crate::params::{Digest, GradientUpdate, ModelVersion};
use crate::time::{Ticks, VirtualTime};

/// Initial ledger contents; only valid in the height-0 block.
#[derive(Clone, Debug, PartialEq)]
pub struct GenesisSpec {
    pub model: ModelVersion,
    pub trainers: Vec<TrainerId>,
    /// When false, trust stays uniform and TrustAdjust is refused.
    pub scoring: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundAction {
    Open { at: VirtualTime, deadline: Option<VirtualTime> },
    Extend { by: Ticks },
    Close,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TxKind {
    Genesis(GenesisSpec),
    ShareGradient { round: u64, update: GradientUpdate },
    /// The next model plus the (trainer, weight) pairs aggregated into it.
    ReleaseModel { model: ModelVersion, applied: Vec<(TrainerId, f64)> },
    TrustAdjust { trainer: TrainerId, new_raw: f64 },
    RoundControl { round: u64, action: RoundAction },
}

impl TxKind {
    pub fn name(&self) -> &'static str {
        match self {
            TxKind::Genesis(_) => "Genesis",
            TxKind::ShareGradient { .. } => "ShareGradient",
            TxKind::ReleaseModel { .. } => "ReleaseModel",
            TxKind::TrustAdjust { .. } => "TrustAdjust",
            TxKind::RoundControl { .. } => "RoundControl",
        }
    }
}

impl Canonical for TxKind {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            TxKind::Genesis(g) => {
                enc.u8(0);
                g.model.encode(enc);
                enc.len(g.trainers.len());
                for t in &g.trainers {
                    enc.u32(t.0);
                }
                enc.bool(g.scoring);
            }
            TxKind::ShareGradient { round, update } => {
                enc.u8(1).u64(*round);
                update.encode(enc);
            }
            TxKind::ReleaseModel { model, applied } => {
                enc.u8(2);
                model.encode(enc);
                enc.len(applied.len());
                for (t, w) in applied {
                    enc.u32(t.0).f64(*w);
                }
            }
            TxKind::TrustAdjust { trainer, new_raw } => {
                enc.u8(3).u32(trainer.0).f64(*new_raw);
            }
            TxKind::RoundControl { round, action } => {
                enc.u8(4).u64(*round);
                match action {
                    RoundAction::Open { at, deadline } => {
                        enc.u8(0).u64(at.0);
                        match deadline {
                            Some(d) => enc.u8(1).u64(d.0),
                            None => enc.u8(0),
                        };
                    }
                    RoundAction::Extend { by } => {
                        enc.u8(1).u64(*by);
                    }
                    RoundAction::Close => {
                        enc.u8(2);
                    }
                }
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tag = dec.u8()?;
        Ok(match tag {
            0 => {
                let model = ModelVersion::decode(dec)?;
                let n = dec.seq_len()?;
                let trainers = (0..n).map(|_| dec.u32().map(TrainerId)).collect::<Result<_, _>>()?;
                let scoring = dec.bool()?;
                TxKind::Genesis(GenesisSpec { model, trainers, scoring })
            }
            1 => TxKind::ShareGradient { round: dec.u64()?, update: GradientUpdate::decode(dec)? },
            2 => {
                let model = ModelVersion::decode(dec)?;
                let n = dec.seq_len()?;
                let applied = (0..n)
                    .map(|_| Ok((TrainerId(dec.u32()?), dec.f64()?)))
                    .collect::<Result<_, DecodeError>>()?;
                TxKind::ReleaseModel { model, applied }
            }
            3 => TxKind::TrustAdjust { trainer: TrainerId(dec.u32()?), new_raw: dec.f64()? },
            4 => {
                let round = dec.u64()?;
                let action = match dec.u8()? {
                    0 => {
                        let at = VirtualTime(dec.u64()?);
                        let deadline = match dec.u8()? {
                            0 => None,
                            1 => Some(VirtualTime(dec.u64()?)),
                            t => return Err(dec.tag_error("deadline", t)),
                        };
                        RoundAction::Open { at, deadline }
                    }
                    1 => RoundAction::Extend { by: dec.u64()? },
                    2 => RoundAction::Close,
                    t => return Err(dec.tag_error("round action", t)),
                };
                TxKind::RoundControl { round, action }
            }
            t => return Err(dec.tag_error("transaction kind", t)),
        })
    }
}

/// A ledger entry. `payload_digest` is SHA-256 of the canonical `kind` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Transaction {
    pub kind: TxKind,
    pub author: NodeId,
    pub nonce: u64,
    pub payload_digest: Digest,
}

impl Transaction {
    pub fn new(kind: TxKind, author: impl Into<NodeId>, nonce: u64) -> Self {
        let payload_digest = Digest::of(&kind.to_bytes());
        Self { kind, author: author.into(), nonce, payload_digest }
    }

    pub fn payload_ok(&self) -> bool {
        Digest::of(&self.kind.to_bytes()) == self.payload_digest
    }
}

impl Canonical for NodeId {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            NodeId::Trainer(t) => enc.u8(0).u32(t.0),
            NodeId::Validator(v) => enc.u8(1).u32(v.0),
        };
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(NodeId::Trainer(TrainerId(dec.u32()?))),
            1 => Ok(NodeId::Validator(ValidatorId(dec.u32()?))),
            t => Err(dec.tag_error("node id", t)),
        }
    }
}

impl Canonical for Transaction {
    fn encode(&self, enc: &mut Encoder) {
        self.kind.encode(enc);
        self.author.encode(enc);
        enc.u64(self.nonce);
        self.payload_digest.encode(enc);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            kind: TxKind::decode(dec)?,
            author: NodeId::decode(dec)?,
            nonce: dec.u64()?,
            payload_digest: Digest::decode(dec)?,
        })
    }
}
