use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::time::{Ticks, VirtualTime};

/// Per-message delay and loss. Before `gst` messages are dropped with
/// `drop_prob`; from `gst` on every message arrives within `base + jitter`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    #[serde(default)]
    pub base: Ticks,
    #[serde(default)]
    pub jitter: Ticks,
    #[serde(default)]
    pub drop_prob: f64,
    #[serde(default)]
    pub gst: Option<VirtualTime>,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self::fixed(0)
    }
}

impl LatencyModel {
    pub fn fixed(base: Ticks) -> Self {
        Self { base, jitter: 0, drop_prob: 0.0, gst: None }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(format!("drop_prob {} not in [0, 1)", self.drop_prob));
        }
        Ok(())
    }

    pub fn after_gst(&self, now: VirtualTime) -> bool {
        self.gst.is_some_and(|g| now >= g)
    }
}

/// Arrival time of a message sent at `now`, or `None` if it is lost.
pub fn deliver<R: Rng + ?Sized>(model: &LatencyModel, rng: &mut R, now: VirtualTime) -> Option<VirtualTime> {
    if model.drop_prob > 0.0 && !model.after_gst(now) && rng.random::<f64>() < model.drop_prob {
        return None;
    }
    let jitter = if model.jitter > 0 { rng.random_range(0..=model.jitter) } else { 0 };
    Some(now + model.base + jitter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn fixed_latency() {
        let mut rng = stream_rng(1, &[]);
        assert_eq!(deliver(&LatencyModel::fixed(10), &mut rng, VirtualTime(7)), Some(VirtualTime(17)));
    }

    #[test]
    fn drops_only_before_gst() {
        let mut rng = stream_rng(1, &[]);
        let m = LatencyModel { base: 1, jitter: 4, drop_prob: 0.999_999, gst: Some(VirtualTime(100)) };
        assert!((0..100).all(|t| deliver(&m, &mut rng, VirtualTime(t)).is_none()));
        for t in 100..400 {
            let at = deliver(&m, &mut rng, VirtualTime(t)).unwrap();
            assert!(at >= VirtualTime(t + 1) && at <= VirtualTime(t + 5));
        }
    }

    #[test]
    fn validation() {
        assert!(LatencyModel { drop_prob: 1.0, ..LatencyModel::fixed(0) }.validate().is_err());
        assert!(LatencyModel::fixed(3).validate().is_ok());
    }
}
