//! Oracle checks shared by the per-module suites and the acceptance run.
#![allow(dead_code)]

use flobc::aggregation::{aggregate, uniform_weights, AggregationInput};
use flobc::consensus::sim::{run_consensus_sim, ConsensusSimConfig};
use flobc::ids::TrainerId;
use flobc::learner::{Dataset, ModelArch, ModelSpec};
use flobc::params::{FlatParams, GradientUpdate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub fn mean_oracle(base: &[f64], deltas: &[Vec<f64>]) -> Vec<f64> {
    (0..base.len())
        .map(|j| base[j] + deltas.iter().map(|d| d[j]).sum::<f64>() / deltas.len() as f64)
        .collect()
}

pub fn updates(deltas: &[Vec<f64>], weights: &[f64]) -> Vec<(GradientUpdate, f64)> {
    deltas
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (d, &w))| (GradientUpdate::new(TrainerId(i as u32), 4, d.clone(), 1).unwrap(), w))
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest per-coordinate deviation from the mean oracle under uniform
/// weights, and largest change from rescaling random weights.
pub fn aggregation_errors(cases: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean_err, mut scale_err) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let dim = rng.random_range(1..40);
        let k = rng.random_range(1..12);
        let base: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let deltas: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let base_p = FlatParams::new(base.clone()).unwrap();

        let uniform = uniform_weights(k).unwrap();
        let got = aggregate(&AggregationInput::all_accepted(base_p.clone(), updates(&deltas, &uniform))).unwrap();
        mean_err = mean_err.max(max_abs_diff(got.values(), &mean_oracle(&base, &deltas)));

        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..3.0)).collect();
        let scale = rng.random_range(1e-3..1e3);
        let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let a = aggregate(&AggregationInput::all_accepted(base_p.clone(), updates(&deltas, &weights))).unwrap();
        let b = aggregate(&AggregationInput::all_accepted(base_p, updates(&deltas, &scaled))).unwrap();
        scale_err = scale_err.max(max_abs_diff(a.values(), b.values()));
    }
    (mean_err, scale_err)
}

/// Mean cross-entropy plus `l2/2 * |theta|^2`, straight from the definitions.
pub fn reference_loss(
    arch: ModelArch,
    d: usize,
    c: usize,
    theta: &[f64],
    xs: &[Vec<f64>],
    ys: &[usize],
    l2: f64,
) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let logits: Vec<f64> = match arch {
            ModelArch::SoftmaxRegression => (0..c)
                .map(|k| theta[c * d + k] + (0..d).map(|j| theta[k * d + j] * x[j]).sum::<f64>())
                .collect(),
            ModelArch::OneHiddenMlp { hidden: h } => {
                let w1 = |j: usize, i: usize| theta[j * d + i];
                let b1 = |j: usize| theta[h * d + j];
                let w2 = |k: usize, j: usize| theta[h * d + h + k * h + j];
                let b2 = |k: usize| theta[h * d + h + c * h + k];
                let a: Vec<f64> =
                    (0..h).map(|j| (b1(j) + (0..d).map(|i| w1(j, i) * x[i]).sum::<f64>()).tanh()).collect();
                (0..c).map(|k| b2(k) + (0..h).map(|j| w2(k, j) * a[j]).sum::<f64>()).collect()
            }
        };
        let norm: f64 = logits.iter().map(|z| z.exp()).sum();
        total += norm.ln() - logits[y];
    }
    total / xs.len() as f64 + 0.5 * l2 * theta.iter().map(|t| t * t).sum::<f64>()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub struct GradientCheck {
    /// Worst relative error between the analytic and numeric gradients.
    pub worst_grad: f64,
    /// Worst relative difference between the library and reference losses.
    pub worst_loss: f64,
}

/// Random small softmax and MLP instances, alternating.
pub fn gradient_check(instances: usize, seed: u64, step: f64) -> GradientCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradientCheck { worst_grad: 0.0, worst_loss: 0.0 };
    for i in 0..instances {
        let d = rng.random_range(1..6);
        let c = rng.random_range(2..5);
        let n = rng.random_range(1..8);
        let arch = if i % 2 == 0 {
            ModelArch::SoftmaxRegression
        } else {
            ModelArch::OneHiddenMlp { hidden: rng.random_range(1..5) }
        };
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        ys[0] = c - 1;
        let spec = ModelSpec::new(arch, d, c);
        let theta: Vec<f64> = (0..spec.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l2 = if rng.random_bool(0.5) { rng.random_range(0.0..0.1) } else { 0.0 };

        let labels: Vec<u32> = ys.iter().map(|&y| y as u32).collect();
        let data = Dataset::new(xs.concat(), labels, d, c as u32).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let (loss, grad) = spec.loss_and_gradient(&theta, &data, &rows, l2).unwrap();

        let f = |t: &[f64]| reference_loss(arch, d, c, t, &xs, &ys, l2);
        let expected = f(&theta);
        out.worst_loss = out.worst_loss.max((loss - expected).abs() / expected.abs().max(1.0));

        let mut numeric = vec![0.0; theta.len()];
        let mut t = theta.clone();
        for k in 0..t.len() {
            let orig = t[k];
            t[k] = orig + step;
            let up = f(&t);
            t[k] = orig - step;
            let down = f(&t);
            t[k] = orig;
            numeric[k] = (up - down) / (2.0 * step);
        }
        out.worst_grad = out.worst_grad.max(rel_err(&grad, &numeric));
    }
    out
}

pub struct ConsensusSweep {
    pub schedules: usize,
    pub forks: Vec<String>,
    pub stalls: Vec<String>,
    /// Fewest heights any honest validator committed in any schedule.
    pub min_committed: u64,
}

/// Runs `schedules` randomized adversarial schedules for each size in `sizes`.
pub fn consensus_sweep(sizes: &[usize], schedules: u64, heights: u64) -> ConsensusSweep {
    let cases: Vec<(usize, u64)> = sizes.iter().flat_map(|&n| (0..schedules).map(move |s| (n, s))).collect();
    let results: Vec<(usize, u64, Option<u64>, u64)> = cases
        .par_iter()
        .map(|&(n, seed)| {
            let r = run_consensus_sim(&ConsensusSimConfig::randomized(n, seed, heights));
            (n, seed, r.fork_height(), r.min_committed())
        })
        .collect();
    let forks = results
        .iter()
        .filter_map(|(n, s, f, _)| f.map(|h| format!("n={n} seed={s}: fork at height {h}")))
        .collect();
    let stalls = results
        .iter()
        .filter(|(_, _, _, c)| *c < heights)
        .map(|(n, s, _, c)| format!("n={n} seed={s}: {c} heights"))
        .collect();
    let min_committed = results.iter().map(|r| r.3).min().unwrap_or(0);
    ConsensusSweep { schedules: cases.len(), forks, stalls, min_committed }
}

/// Index of the block record containing byte `pos` of an encoded chain
/// file, or `None` for the file header.
pub fn record_at(bytes: &[u8], pos: usize) -> Option<u64> {
    if pos < 8 {
        return None;
    }
    let mut at = 8;
    let mut index = 0;
    while at < bytes.len() {
        let len = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        let end = at + 8 + len + 32;
        if pos < end {
            return Some(index);
        }
        at = end;
        index += 1;
    }
    None
}

/// Flips `mask` at every position in `positions` and checks verification
/// fails at the record holding that byte. Returns the mismatches.
pub fn flip_failures(bytes: &[u8], positions: impl IntoIterator<Item = usize>, mask: u8) -> Vec<String> {
    let mut bad = Vec::new();
    let mut tampered = bytes.to_vec();
    for pos in positions {
        tampered[pos] ^= mask;
        let v = flobc::ledger::verify_chain_bytes(&tampered);
        tampered[pos] ^= mask;
        let want = record_at(bytes, pos).unwrap_or(0);
        match v.failure {
            Some((h, _)) if h == want => {}
            other => bad.push(format!("byte {pos}: expected failure at {want}, got {other:?}")),
        }
    }
    bad
}
