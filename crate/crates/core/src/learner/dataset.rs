use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::rng::{stream, stream_rng};

/// Labelled samples stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    n_features: usize,
    n_classes: u32,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<u32>,
        n_features: usize,
        n_classes: u32,
    ) -> Result<Self, LearnerError> {
        if labels.is_empty() {
            return Err(LearnerError::EmptyDataset);
        }
        if n_features == 0 || features.len() != labels.len() * n_features {
            return Err(LearnerError::InvalidSize(format!(
                "{} features for {} rows of width {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(LearnerError::LabelOutOfRange { row, label, classes: n_classes });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(LearnerError::NonFiniteFeature { row: i / n_features });
        }
        Ok(Self { features, labels, n_features, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> u32 {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes as usize];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset, LearnerError> {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.n_features, self.n_classes)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, LearnerError> {
        if other.n_features != self.n_features {
            return Err(LearnerError::FeatureMismatch { expected: self.n_features, actual: other.n_features });
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(features, labels, self.n_features, self.n_classes.max(other.n_classes))
    }

    /// Consecutive row ranges of the given sizes after a seeded shuffle.
    pub fn partition(&self, sizes: &[usize], seed: u64) -> Result<Vec<Dataset>, LearnerError> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(LearnerError::InvalidSize(format!(
                "partition of {total} rows from {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, &[stream::SPLIT]));
        let mut start = 0;
        sizes
            .iter()
            .map(|&n| {
                let part = self.select(&order[start..start + n]);
                start += n;
                part
            })
            .collect()
    }
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub features: usize,
    pub classes: u32,
    /// Standard deviation of each class-center coordinate.
    #[serde(default = "default_class_sep")]
    pub class_sep: f64,
    /// Standard deviation of samples around their center.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_class_sep() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

/// `generate_synthetic_with` with unit center spread and unit noise.
pub fn generate_synthetic(
    seed: u64,
    samples: usize,
    features: usize,
    classes: u32,
) -> Result<Dataset, LearnerError> {
    generate_synthetic_with(
        seed,
        &SyntheticSpec {
            samples,
            features,
            classes,
            class_sep: default_class_sep(),
            noise: default_noise(),
        },
    )
}

/// `classes` Gaussian clusters. Labels are assigned round-robin before a
/// shuffle, so class counts differ by at most one.
pub fn generate_synthetic_with(seed: u64, spec: &SyntheticSpec) -> Result<Dataset, LearnerError> {
    let SyntheticSpec { samples: n, features: d, classes: c, class_sep, noise } = *spec;
    if c < 2 || n < c as usize || d == 0 {
        return Err(LearnerError::InvalidSize(format!(
            "need samples >= classes >= 2 and features >= 1 (samples {n}, features {d}, classes {c})"
        )));
    }
    if !(class_sep.is_finite() && noise.is_finite() && class_sep >= 0.0 && noise >= 0.0) {
        return Err(LearnerError::InvalidSize("spread parameters must be finite and >= 0".into()));
    }
    let mut rng = stream_rng(seed, &[stream::DATASET]);
    let centers: Vec<f64> = (0..c as usize * d)
        .map(|_| class_sep * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut labels: Vec<u32> = (0..n).map(|i| (i % c as usize) as u32).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * d);
    for &l in &labels {
        let center = &centers[l as usize * d..(l as usize + 1) * d];
        features.extend(center.iter().map(|m| m + noise * rng.sample::<f64, _>(StandardNormal)));
    }
    Dataset::new(features, labels, d, c)
}

/// Samples `floor(fraction * n)` rows without replacement.
pub fn shard(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, LearnerError> {
    let n = dataset.len();
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(LearnerError::InvalidSize(format!("shard fraction {fraction} not in (0, 1]")));
    }
    let m = (fraction * n as f64).floor() as usize;
    if m == 0 {
        return Err(LearnerError::EmptyShard { fraction, n });
    }
    let picked = index::sample(&mut stream_rng(seed, &[stream::TRAINER_SHARD]), n, m).into_vec();
    dataset.select(&picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(7, 100, 4, 2).unwrap();
        let b = generate_synthetic(7, 100, 4, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![50, 50]);
        let odd = generate_synthetic(3, 101, 2, 3).unwrap();
        for count in odd.class_counts() {
            assert!((33..=34).contains(&count));
        }
    }

    #[test]
    fn synthetic_depends_on_seed() {
        let a = generate_synthetic(1, 100, 4, 2).unwrap();
        let b = generate_synthetic(2, 100, 4, 2).unwrap();
        assert!((0..a.len()).any(|i| a.row(i) != b.row(i)));
    }

    #[test]
    fn synthetic_rejects_invalid_sizes() {
        assert!(generate_synthetic(0, 100, 4, 1).is_err());
        assert!(generate_synthetic(0, 2, 4, 3).is_err());
        assert!(generate_synthetic(0, 10, 0, 2).is_err());
    }

    #[test]
    fn shard_sizes_and_determinism() {
        let data = generate_synthetic(1, 1000, 3, 4).unwrap();
        assert_eq!(shard(&data, 0.3, 5).unwrap().len(), 300);
        assert_eq!(shard(&data, 0.3, 5).unwrap(), shard(&data, 0.3, 5).unwrap());
        assert_ne!(shard(&data, 0.3, 5).unwrap(), shard(&data, 0.3, 6).unwrap());
        assert!(matches!(shard(&data, 0.0005, 5), Err(LearnerError::EmptyShard { .. })));
        assert!(shard(&data, 1.5, 5).is_err());
    }

    #[test]
    fn full_shard_is_a_permutation() {
        let data = generate_synthetic(1, 50, 2, 2).unwrap();
        let full = shard(&data, 1.0, 9).unwrap();
        assert_eq!(full.len(), data.len());
        let key = |d: &Dataset| {
            let mut rows: Vec<Vec<u64>> = (0..d.len())
                .map(|i| d.row(i).iter().map(|v| v.to_bits()).chain([d.label(i) as u64]).collect())
                .collect();
            rows.sort();
            rows
        };
        assert_eq!(key(&full), key(&data));
    }

    #[test]
    fn dataset_validates_labels() {
        assert!(matches!(
            Dataset::new(vec![0.0, 1.0], vec![0, 2], 1, 2),
            Err(LearnerError::LabelOutOfRange { row: 1, label: 2, classes: 2 })
        ));
        assert!(matches!(Dataset::new(vec![], vec![], 1, 2), Err(LearnerError::EmptyDataset)));
    }

    #[test]
    fn partition_is_disjoint() {
        let data = generate_synthetic(4, 30, 1, 2).unwrap();
        let parts = data.partition(&[10, 10, 10], 2).unwrap();
        let mut all: Vec<u64> = parts
            .iter()
            .flat_map(|p| (0..p.len()).map(move |i| p.row(i)[0].to_bits()))
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 30);
        assert!(data.partition(&[31], 2).is_err());
    }
}
