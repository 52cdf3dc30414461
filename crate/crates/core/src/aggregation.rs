//! Trust-weighted federated averaging of gradient deltas.

use thiserror::Error;

use crate::params::{FlatParams, GradientUpdate, ParamsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    /// No accepted update carries positive weight; the round releases nothing.
    #[error("round yields no new model: no accepted update with positive weight")]
    NoAcceptedUpdate,
    #[error("accepted mask has {mask} entries for {updates} updates")]
    MaskLength { mask: usize, updates: usize },
    #[error("weight {weight} for update {index} is not a finite non-negative real")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("update {index} has dimension {actual}, base has {expected}")]
    DimMismatch { index: usize, expected: usize, actual: usize },
    #[error("update {index} is based on version {actual}, others on {expected}")]
    MixedBaseVersion { index: usize, expected: u64, actual: u64 },
    #[error(transparent)]
    Params(#[from] ParamsError),
}

#[derive(Clone, Debug)]
pub struct AggregationInput {
    pub base: FlatParams,
    /// Each update with its trust weight.
    pub updates: Vec<(GradientUpdate, f64)>,
    pub accepted: Vec<bool>,
}

impl AggregationInput {
    /// All updates accepted.
    pub fn all_accepted(base: FlatParams, updates: Vec<(GradientUpdate, f64)>) -> Self {
        let accepted = vec![true; updates.len()];
        Self { base, updates, accepted }
    }
}

/// `base + sum_i w_i * delta_i / sum_i w_i` over accepted updates with
/// positive weight. Terms are summed in ascending trainer-id order so the
/// result does not depend on input order.
pub fn aggregate(input: &AggregationInput) -> Result<FlatParams, AggregationError> {
    let AggregationInput { base, updates, accepted } = input;
    if accepted.len() != updates.len() {
        return Err(AggregationError::MaskLength { mask: accepted.len(), updates: updates.len() });
    }
    let mut base_version = None;
    for (index, (u, w)) in updates.iter().enumerate() {
        if !(w.is_finite() && *w >= 0.0) {
            return Err(AggregationError::InvalidWeight { index, weight: *w });
        }
        if u.dim() != base.dim() {
            return Err(AggregationError::DimMismatch { index, expected: base.dim(), actual: u.dim() });
        }
        match base_version {
            None => base_version = Some(u.base_version),
            Some(v) if v != u.base_version => {
                return Err(AggregationError::MixedBaseVersion { index, expected: v, actual: u.base_version })
            }
            Some(_) => {}
        }
    }
    let mut applied: Vec<&(GradientUpdate, f64)> = updates
        .iter()
        .zip(accepted)
        .filter(|((_, w), &ok)| ok && *w > 0.0)
        .map(|(uw, _)| uw)
        .collect();
    if applied.is_empty() {
        return Err(AggregationError::NoAcceptedUpdate);
    }
    applied.sort_by_key(|(u, _)| u.trainer_id);
    let total: f64 = applied.iter().map(|(_, w)| w).sum();
    let mut values = base.values().to_vec();
    for (u, w) in applied {
        let coeff = w / total;
        for (v, d) in values.iter_mut().zip(u.delta()) {
            *v += coeff * d;
        }
    }
    Ok(FlatParams::new(values)?)
}

/// `k` weights of `1/k`.
pub fn uniform_weights(k: usize) -> Result<Vec<f64>, AggregationError> {
    if k == 0 {
        return Err(AggregationError::NoAcceptedUpdate);
    }
    Ok(vec![1.0 / k as f64; k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::TrainerId;

    fn upd(t: u32, delta: &[f64]) -> GradientUpdate {
        GradientUpdate::new(TrainerId(t), 0, delta.to_vec(), 1).unwrap()
    }

    fn base(v: &[f64]) -> FlatParams {
        FlatParams::new(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_mean() {
        let input = AggregationInput::all_accepted(
            base(&[0.0, 0.0]),
            vec![(upd(0, &[1.0, 3.0]), 0.5), (upd(1, &[3.0, 5.0]), 0.5)],
        );
        assert_eq!(aggregate(&input).unwrap().values(), &[2.0, 4.0]);
    }

    #[test]
    fn degenerate_weight_applies_single_delta_exactly() {
        let input = AggregationInput::all_accepted(
            base(&[0.1, 0.2]),
            vec![(upd(0, &[0.3, -0.7]), 1.0), (upd(1, &[9.0, 9.0]), 0.0)],
        );
        assert_eq!(aggregate(&input).unwrap().values(), &[0.1 + 0.3, 0.2 + -0.7]);
    }

    #[test]
    fn weighted_arithmetic() {
        let input = AggregationInput::all_accepted(
            base(&[1.0, 1.0]),
            vec![(upd(0, &[4.0, 0.0]), 0.75), (upd(1, &[0.0, 8.0]), 0.25)],
        );
        assert_eq!(aggregate(&input).unwrap().values(), &[4.0, 3.0]);
    }

    #[test]
    fn nothing_accepted_yields_no_model() {
        let input = AggregationInput {
            base: base(&[0.0]),
            updates: vec![(upd(0, &[1.0]), 1.0), (upd(1, &[1.0]), 0.0)],
            accepted: vec![false, true],
        };
        assert_eq!(aggregate(&input), Err(AggregationError::NoAcceptedUpdate));
    }

    #[test]
    fn input_validation() {
        let b = base(&[0.0]);
        let bad_dim = AggregationInput::all_accepted(b.clone(), vec![(upd(0, &[1.0, 2.0]), 1.0)]);
        assert!(matches!(aggregate(&bad_dim), Err(AggregationError::DimMismatch { .. })));
        let bad_w = AggregationInput::all_accepted(b.clone(), vec![(upd(0, &[1.0]), -1.0)]);
        assert!(matches!(aggregate(&bad_w), Err(AggregationError::InvalidWeight { .. })));
        let mut other = upd(1, &[1.0]);
        other.base_version = 4;
        let mixed = AggregationInput::all_accepted(b, vec![(upd(0, &[1.0]), 1.0), (other, 1.0)]);
        assert!(matches!(aggregate(&mixed), Err(AggregationError::MixedBaseVersion { .. })));
    }

    #[test]
    fn input_order_does_not_matter() {
        let ups = vec![(upd(2, &[0.1]), 0.3), (upd(0, &[0.7]), 0.2), (upd(1, &[-0.4]), 0.5)];
        let mut rev = ups.clone();
        rev.reverse();
        let a = aggregate(&AggregationInput::all_accepted(base(&[0.3]), ups)).unwrap();
        let b = aggregate(&AggregationInput::all_accepted(base(&[0.3]), rev)).unwrap();
        assert_eq!(a.values()[0].to_bits(), b.values()[0].to_bits());
    }

    #[test]
    fn uniform_weight_lists() {
        assert_eq!(uniform_weights(1).unwrap(), vec![1.0]);
        assert_eq!(uniform_weights(4).unwrap(), vec![0.25; 4]);
        for w in uniform_weights(6).unwrap() {
            assert!((w - 0.16667).abs() <= 1e-5);
        }
        assert!(uniform_weights(0).is_err());
    }
}
