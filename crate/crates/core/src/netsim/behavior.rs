use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::params::{GradientUpdate, ParamsError};

/// Noise scale per trainer index used by the noisy-trainers experiment.
pub const NOISE_PER_INDEX: f64 = 0.0545;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Honest,
    /// Adds N(0, sigma^2) to every delta coordinate.
    Noisy { sigma: f64 },
    /// Skips a round with probability `skip_prob`.
    Lazy { skip_prob: f64 },
    /// Validators only: sends conflicting consensus votes.
    Equivocator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeBehavior {
    #[serde(default = "honest")]
    pub profile: Profile,
    #[serde(default = "unit_pace")]
    pub pace: f64,
}

fn honest() -> Profile {
    Profile::Honest
}

fn unit_pace() -> f64 {
    1.0
}

impl Default for NodeBehavior {
    fn default() -> Self {
        Self { profile: Profile::Honest, pace: 1.0 }
    }
}

impl NodeBehavior {
    pub fn honest(pace: f64) -> Self {
        Self { profile: Profile::Honest, pace }
    }

    pub fn noisy(sigma: f64) -> Self {
        Self { profile: Profile::Noisy { sigma }, pace: 1.0 }
    }

    /// Noise scaled linearly with the trainer index.
    pub fn indexed_noise(index: usize) -> Self {
        Self::noisy(NOISE_PER_INDEX * index as f64)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.pace.is_finite() && self.pace > 0.0) {
            return Err(format!("pace {} must be positive", self.pace));
        }
        match self.profile {
            Profile::Noisy { sigma } if !(sigma.is_finite() && sigma >= 0.0) => {
                Err(format!("sigma {sigma} must be finite and non-negative"))
            }
            Profile::Lazy { skip_prob } if !(0.0..=1.0).contains(&skip_prob) => {
                Err(format!("skip_prob {skip_prob} not in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    pub fn sigma(&self) -> f64 {
        match self.profile {
            Profile::Noisy { sigma } => sigma,
            _ => 0.0,
        }
    }
}

/// Perturbs the delta with Gaussian noise drawn through rand_distr's
/// ziggurat `StandardNormal` from `rng`, one draw per coordinate in order.
pub fn apply_noise<R: Rng + ?Sized>(
    update: &GradientUpdate,
    behavior: &NodeBehavior,
    rng: &mut R,
) -> Result<GradientUpdate, ParamsError> {
    let sigma = behavior.sigma();
    if sigma == 0.0 {
        return Ok(update.clone());
    }
    let delta = update.delta().iter().map(|d| d + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    update.with_delta(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::TrainerId;
    use crate::rng::stream_rng;

    fn update() -> GradientUpdate {
        GradientUpdate::new(TrainerId(0), 0, vec![0.5; 4000], 1).unwrap()
    }

    #[test]
    fn index_zero_and_honest_are_identity() {
        let mut rng = stream_rng(3, &[]);
        assert_eq!(apply_noise(&update(), &NodeBehavior::indexed_noise(0), &mut rng).unwrap(), update());
        assert_eq!(apply_noise(&update(), &NodeBehavior::default(), &mut rng).unwrap(), update());
    }

    #[test]
    fn sigma_scales_with_index() {
        assert!((NodeBehavior::indexed_noise(5).sigma() - 0.2725).abs() < 1e-15);
        let mut rng = stream_rng(3, &[]);
        let noisy = apply_noise(&update(), &NodeBehavior::indexed_noise(5), &mut rng).unwrap();
        let n = noisy.dim() as f64;
        let mean = noisy.delta().iter().map(|d| d - 0.5).sum::<f64>() / n;
        let sd = (noisy.delta().iter().map(|d| (d - 0.5 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((sd - 0.2725).abs() < 0.02, "sd {sd}");
    }

    #[test]
    fn validation() {
        assert!(NodeBehavior::honest(0.0).validate().is_err());
        assert!(NodeBehavior { profile: Profile::Lazy { skip_prob: 1.5 }, pace: 1.0 }.validate().is_err());
        assert!(NodeBehavior::noisy(-1.0).validate().is_err());
        assert!(NodeBehavior::indexed_noise(3).validate().is_ok());
    }
}
