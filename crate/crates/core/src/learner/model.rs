//! Built-in models and minibatch SGD.
//!
//! Parameter layouts (row-major matrices, concatenated in this order):
//! - softmax regression: `W [classes x features]`, `b [classes]`
//! - one-hidden-layer MLP: `W1 [hidden x features]`, `b1 [hidden]`,
//!   `W2 [classes x hidden]`, `b2 [classes]`, with `tanh` activation.
//!
//! Loss is mean softmax cross-entropy over the batch plus an optional
//! `0.5 * l2 * |theta|^2` penalty.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LearnerError};
use crate::ids::TrainerId;
use crate::params::{FlatParams, GradientUpdate};
use crate::rng::{stream, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelArch {
    SoftmaxRegression,
    OneHiddenMlp { hidden: usize },
}

/// Architecture plus input/output widths; fixes the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: ModelArch,
    pub n_features: usize,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn new(arch: ModelArch, n_features: usize, n_classes: usize) -> Self {
        Self { arch, n_features, n_classes }
    }

    pub fn for_dataset(arch: ModelArch, data: &Dataset) -> Self {
        Self::new(arch, data.n_features(), data.n_classes() as usize)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let (d, c) = (self.n_features, self.n_classes);
        match self.arch {
            ModelArch::SoftmaxRegression => vec![c * d, c],
            ModelArch::OneHiddenMlp { hidden: h } => vec![h * d, h, c * h, c],
        }
    }

    pub fn dim(&self) -> usize {
        self.layer_sizes().iter().sum()
    }

    /// Zeros for softmax regression; Glorot-uniform weights and zero biases
    /// for the MLP.
    pub fn init(&self, seed: u64) -> FlatParams {
        let mut values = vec![0.0; self.dim()];
        if let ModelArch::OneHiddenMlp { hidden: h } = self.arch {
            let (d, c) = (self.n_features, self.n_classes);
            let mut rng = stream_rng(seed, &[stream::INIT]);
            let a1 = (6.0 / (d + h) as f64).sqrt();
            for v in &mut values[..h * d] {
                *v = rng.random_range(-a1..a1);
            }
            let a2 = (6.0 / (h + c) as f64).sqrt();
            let w2 = h * d + h;
            for v in &mut values[w2..w2 + c * h] {
                *v = rng.random_range(-a2..a2);
            }
        }
        FlatParams::new(values).expect("model dimension is positive")
    }

    fn check(&self, params: &[f64], data: &Dataset) -> Result<(), LearnerError> {
        if params.len() != self.dim() {
            return Err(LearnerError::DimMismatch { expected: self.dim(), actual: params.len() });
        }
        if data.n_features() != self.n_features {
            return Err(LearnerError::FeatureMismatch {
                expected: self.n_features,
                actual: data.n_features(),
            });
        }
        if data.n_classes() as usize > self.n_classes {
            return Err(LearnerError::InvalidSize(format!(
                "dataset has {} classes, model outputs {}",
                data.n_classes(),
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Output logits for one sample; `hidden` is scratch space for the MLP.
    fn logits(&self, params: &[f64], x: &[f64], hidden: &mut Vec<f64>, out: &mut [f64]) {
        let (d, c) = (self.n_features, self.n_classes);
        match self.arch {
            ModelArch::SoftmaxRegression => {
                let (w, b) = params.split_at(c * d);
                for k in 0..c {
                    out[k] = b[k] + dot(&w[k * d..(k + 1) * d], x);
                }
            }
            ModelArch::OneHiddenMlp { hidden: h } => {
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                hidden.clear();
                hidden.extend((0..h).map(|j| (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).tanh()));
                for k in 0..c {
                    out[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
                }
            }
        }
    }

    /// Predicted class; ties resolve to the lowest index.
    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        let mut z = vec![0.0; self.n_classes];
        self.logits(params, x, &mut Vec::new(), &mut z);
        argmax(&z)
    }

    /// Mean cross-entropy over `rows` and its gradient.
    pub fn loss_and_gradient(
        &self,
        params: &[f64],
        data: &Dataset,
        rows: &[usize],
        l2: f64,
    ) -> Result<(f64, Vec<f64>), LearnerError> {
        self.check(params, data)?;
        if rows.is_empty() {
            return Err(LearnerError::EmptyDataset);
        }
        let (d, c) = (self.n_features, self.n_classes);
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        let mut hidden = Vec::new();
        let mut z = vec![0.0; c];
        let mut gz = vec![0.0; c];
        for &i in rows {
            let x = data.row(i);
            let y = data.label(i) as usize;
            self.logits(params, x, &mut hidden, &mut z);
            let lse = log_sum_exp(&z);
            loss += lse - z[y];
            for k in 0..c {
                gz[k] = (z[k] - lse).exp() - if k == y { 1.0 } else { 0.0 };
            }
            match self.arch {
                ModelArch::SoftmaxRegression => {
                    let (gw, gb) = grad.split_at_mut(c * d);
                    for k in 0..c {
                        axpy(gz[k], x, &mut gw[k * d..(k + 1) * d]);
                        gb[k] += gz[k];
                    }
                }
                ModelArch::OneHiddenMlp { hidden: h } => {
                    let w2 = &params[h * d + h..h * d + h + c * h];
                    let (gw1, rest) = grad.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    for k in 0..c {
                        axpy(gz[k], &hidden, &mut gw2[k * h..(k + 1) * h]);
                        gb2[k] += gz[k];
                    }
                    for j in 0..h {
                        let gh: f64 = (0..c).map(|k| w2[k * h + j] * gz[k]).sum();
                        let ga = gh * (1.0 - hidden[j] * hidden[j]);
                        axpy(ga, x, &mut gw1[j * d..(j + 1) * d]);
                        gb1[j] += ga;
                    }
                }
            }
        }
        let scale = 1.0 / rows.len() as f64;
        loss *= scale;
        for g in &mut grad {
            *g *= scale;
        }
        if l2 > 0.0 {
            loss += 0.5 * l2 * params.iter().map(|p| p * p).sum::<f64>();
            axpy(l2, params, &mut grad);
        }
        Ok((loss, grad))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..z.len() {
        if z[k] > z[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    #[serde(default = "default_arch")]
    pub model_arch: ModelArch,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub l2: f64,
}

fn default_arch() -> ModelArch {
    ModelArch::SoftmaxRegression
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            model_arch: ModelArch::SoftmaxRegression,
            learning_rate: 0.1,
            batch_size: 16,
            seed: 0,
            l2: 0.0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LearnerError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(LearnerError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(LearnerError::InvalidConfig("l2 must be >= 0".into()));
        }
        if let ModelArch::OneHiddenMlp { hidden: 0 } = self.model_arch {
            return Err(LearnerError::InvalidConfig("hidden size must be positive".into()));
        }
        Ok(())
    }
}

/// A model layout bound to its training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub spec: ModelSpec,
    pub config: LearnerConfig,
}

impl Learner {
    pub fn new(spec: ModelSpec, config: LearnerConfig) -> Result<Self, LearnerError> {
        config.validate()?;
        if spec.arch != config.model_arch {
            return Err(LearnerError::InvalidConfig("model spec and config disagree on arch".into()));
        }
        Ok(Self { spec, config })
    }

    /// Optimizer steps in one pass over `n` rows.
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size.min(n).max(1)) as u64
    }

    /// Runs `steps` minibatch SGD steps from `params` and returns
    /// `params_after - params`.
    ///
    /// Rows are shuffled at the start of every epoch; the shuffle stream is
    /// keyed by the learner seed and `stream_key`, so the same key always
    /// replays the same batches.
    pub fn sgd_delta(
        &self,
        params: &FlatParams,
        data: &Dataset,
        steps: u64,
        stream_key: &[u64],
    ) -> Result<Vec<f64>, LearnerError> {
        self.spec.check(params.values(), data)?;
        let mut theta = params.values().to_vec();
        let batch = self.config.batch_size.min(data.len());
        let mut key = vec![stream::SGD];
        key.extend_from_slice(stream_key);
        let mut rng = stream_rng(self.config.seed, &key);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = data.len();
        for _ in 0..steps {
            if cursor >= data.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let end = (cursor + batch).min(data.len());
            let (_, grad) =
                self.spec.loss_and_gradient(&theta, data, &order[cursor..end], self.config.l2)?;
            cursor = end;
            axpy(-self.config.learning_rate, &grad, &mut theta);
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(LearnerError::InvalidConfig(format!(
                "SGD diverged (non-finite weight at {i}); lower the learning rate"
            )));
        }
        Ok(theta.iter().zip(params.values()).map(|(a, b)| a - b).collect())
    }

    /// Mean training loss over the whole dataset.
    pub fn loss(&self, params: &FlatParams, data: &Dataset) -> Result<f64, LearnerError> {
        let rows: Vec<usize> = (0..data.len()).collect();
        Ok(self.spec.loss_and_gradient(params.values(), data, &rows, self.config.l2)?.0)
    }

    pub fn evaluate(&self, params: &FlatParams, data: &Dataset) -> Result<f64, LearnerError> {
        evaluate(&self.spec, params, data)
    }
}

/// Runs `steps` SGD steps and packages the result as an update against
/// `base_version`. `round` keys the batch-order stream.
pub fn compute_gradient_steps(
    learner: &Learner,
    trainer_id: TrainerId,
    base_version: u64,
    params: &FlatParams,
    data: &Dataset,
    steps: u64,
    round: u64,
) -> Result<GradientUpdate, LearnerError> {
    let delta = learner.sgd_delta(params, data, steps, &[trainer_id.0 as u64, round])?;
    Ok(GradientUpdate::new(trainer_id, base_version, delta, steps)?)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate(spec: &ModelSpec, params: &FlatParams, data: &Dataset) -> Result<f64, LearnerError> {
    if data.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    spec.check(params.values(), data)?;
    let mut z = vec![0.0; spec.n_classes];
    let mut hidden = Vec::new();
    let correct = (0..data.len())
        .filter(|&i| {
            spec.logits(params.values(), data.row(i), &mut hidden, &mut z);
            argmax(&z) == data.label(i) as usize
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}
