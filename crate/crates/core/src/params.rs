//! Flat-vector models and gradient updates.
//!
//! Every model is exchanged as a single flat vector of `f64` weights. The
//! canonical encoding of a [`FlatParams`] is its dimension as a `u64`
//! followed by each weight as 8 little-endian bytes of its IEEE-754 bits;
//! [`digest`] is SHA-256 over exactly those bytes.

use std::fmt;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::ids::TrainerId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("parameter vector must have positive dimension")]
    Empty,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("non-finite value in layer {layer} at offset {offset}")]
    NonFiniteLayer { layer: usize, offset: usize },
    #[error("shape mismatch: layer sizes sum to {expected}, flat vector has dimension {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
}

/// A 256-bit SHA-256 digest.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short(&self) -> String {
        self.to_hex()[..12].to_string()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Canonical for Digest {
    fn encode(&self, enc: &mut Encoder) {
        enc.raw(&self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let mut out = [0u8; 32];
        out.copy_from_slice(dec.take(32)?);
        Ok(Digest(out))
    }
}

fn check_finite(values: &[f64]) -> Result<(), ParamsError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(ParamsError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Model weights as one flat vector. Non-empty and finite by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
}

impl FlatParams {
    pub fn new(values: Vec<f64>) -> Result<Self, ParamsError> {
        if values.is_empty() {
            return Err(ParamsError::Empty);
        }
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Result<Self, ParamsError> {
        Self::new(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `self + delta`, rejecting a dimension mismatch or a non-finite result.
    pub fn add(&self, delta: &[f64]) -> Result<FlatParams, ParamsError> {
        if delta.len() != self.dim() {
            return Err(ParamsError::DimMismatch { expected: self.dim(), actual: delta.len() });
        }
        let values = self.values.iter().zip(delta).map(|(a, b)| a + b).collect();
        FlatParams::new(values)
    }
}

impl Canonical for FlatParams {
    fn encode(&self, enc: &mut Encoder) {
        enc.f64_slice(&self.values);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        FlatParams::new(dec.f64_vec()?).map_err(|e| DecodeError::Invalid(e.to_string()))
    }
}

/// Concatenates layers in the order given.
pub fn flatten<L: AsRef<[f64]>>(layers: &[L]) -> Result<FlatParams, ParamsError> {
    let mut values = Vec::with_capacity(layers.iter().map(|l| l.as_ref().len()).sum());
    for (layer, l) in layers.iter().enumerate() {
        let l = l.as_ref();
        if let Some(offset) = l.iter().position(|v| !v.is_finite()) {
            return Err(ParamsError::NonFiniteLayer { layer, offset });
        }
        values.extend_from_slice(l);
    }
    FlatParams::new(values)
}

/// Splits a flat vector back into layers of the given sizes.
pub fn rebuild(flat: &FlatParams, shape: &[usize]) -> Result<Vec<Vec<f64>>, ParamsError> {
    let expected: usize = shape.iter().sum();
    if expected != flat.dim() {
        return Err(ParamsError::ShapeMismatch { expected, actual: flat.dim() });
    }
    let mut rest = flat.values();
    Ok(shape
        .iter()
        .map(|&n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        })
        .collect())
}

/// SHA-256 of the canonical encoding.
pub fn digest(params: &FlatParams) -> Digest {
    Digest::of(&params.to_bytes())
}

/// A trainer's proposed change to a released model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientUpdate {
    pub trainer_id: TrainerId,
    pub base_version: u64,
    delta: Vec<f64>,
    /// Local SGD steps the delta represents.
    pub steps: u64,
}

impl GradientUpdate {
    pub fn new(
        trainer_id: TrainerId,
        base_version: u64,
        delta: Vec<f64>,
        steps: u64,
    ) -> Result<Self, ParamsError> {
        if delta.is_empty() {
            return Err(ParamsError::Empty);
        }
        check_finite(&delta)?;
        Ok(Self { trainer_id, base_version, delta, steps })
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn dim(&self) -> usize {
        self.delta.len()
    }

    /// Replaces the delta, keeping the other fields.
    pub fn with_delta(&self, delta: Vec<f64>) -> Result<Self, ParamsError> {
        Self::new(self.trainer_id, self.base_version, delta, self.steps)
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.to_bytes())
    }
}

impl Canonical for GradientUpdate {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.trainer_id.0)
            .u64(self.base_version)
            .u64(self.steps)
            .f64_slice(&self.delta);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let trainer_id = TrainerId(dec.u32()?);
        let base_version = dec.u64()?;
        let steps = dec.u64()?;
        let delta = dec.f64_vec()?;
        GradientUpdate::new(trainer_id, base_version, delta, steps)
            .map_err(|e| DecodeError::Invalid(e.to_string()))
    }
}

/// A released model with its content digest.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelVersion {
    pub version: u64,
    pub params: FlatParams,
    pub digest: Digest,
}

impl ModelVersion {
    pub fn new(version: u64, params: FlatParams) -> Self {
        let digest = digest(&params);
        Self { version, params, digest }
    }

    /// True when the stored digest matches the params.
    pub fn is_consistent(&self) -> bool {
        digest(&self.params) == self.digest
    }
}

impl Canonical for ModelVersion {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.version);
        self.params.encode(enc);
        self.digest.encode(enc);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let version = dec.u64()?;
        let params = FlatParams::decode(dec)?;
        let digest = Digest::decode(dec)?;
        Ok(Self { version, params, digest })
    }
}
