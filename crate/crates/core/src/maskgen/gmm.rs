//! One-dimensional Gaussian mixtures fitted by k-means seeded EM.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Lower bound on component variances, in HU^2.
pub const VARIANCE_FLOOR: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("component count must be at least 1")]
    NoComponents,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

impl GaussianComponent {
    fn log_density(&self, z: f64) -> f64 {
        let d = z - self.mean;
        -0.5 * (TAU * self.variance).ln() - d * d / (2.0 * self.variance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gmm1d {
    components: Vec<GaussianComponent>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Gmm1d {
    /// Panics on an empty component list.
    pub fn new(components: Vec<GaussianComponent>) -> Self {
        assert!(!components.is_empty());
        Gmm1d { components }
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `log(weight_k) + log N(z; mean_k, variance_k)`.
    pub fn log_joint(&self, k: usize, z: f64) -> f64 {
        let c = &self.components[k];
        c.weight.ln() + c.log_density(z)
    }

    pub fn log_density(&self, z: f64) -> f64 {
        log_sum_exp((0..self.k()).map(|k| self.log_joint(k, z)))
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&z| self.log_density(z)).sum()
    }

    /// Cheapest component for `z` and its cost `-log_joint`.
    pub fn best_component(&self, z: f64) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.k() {
            let cost = -self.log_joint(k, z);
            if cost < best.1 {
                best = (k, cost);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iterations: usize,
    /// Stop once the log-likelihood gain drops below `tolerance * |LL|`.
    pub tolerance: f64,
    pub variance_floor: f64,
    pub kmeans_iterations: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iterations: 100,
            tolerance: 1e-10,
            variance_floor: VARIANCE_FLOOR,
            kmeans_iterations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: Gmm1d,
    /// Log-likelihood of the initial model, then after each EM step.
    pub log_likelihood: Vec<f64>,
}

/// Fits `k` components with default options.
pub fn fit_gmm(samples: &[f64], k: usize, seed: u64) -> Result<Gmm1d, GmmError> {
    Ok(fit_gmm_with(samples, k, seed, &EmOptions::default())?.model)
}

pub fn fit_gmm_with(samples: &[f64], k: usize, seed: u64, opts: &EmOptions) -> Result<GmmFit, GmmError> {
    if k == 0 {
        return Err(GmmError::NoComponents);
    }
    if samples.len() < k {
        return Err(GmmError::TooFewSamples { needed: k, got: samples.len() });
    }
    let centers = quantile_centers(samples, k);
    let init = kmeans_init(samples, centers, seed, opts);
    Ok(run_em(samples, init, opts))
}

fn quantile_centers(samples: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (0..k)
        .map(|i| sorted[(((i as f64 + 0.5) / k as f64) * n as f64) as usize % n])
        .collect()
}

fn nearest(centers: &[f64], z: f64) -> usize {
    let mut best = 0;
    for (i, c) in centers.iter().enumerate() {
        if (z - c).abs() < (z - centers[best]).abs() {
            best = i;
        }
    }
    best
}

/// Lloyd iterations from the given centers, then one Gaussian per cluster.
/// Empty clusters are re-seeded at a random sample.
pub fn kmeans_init(samples: &[f64], mut centers: Vec<f64>, seed: u64, opts: &EmOptions) -> Gmm1d {
    let k = centers.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0usize; samples.len()];
    for _ in 0..opts.kmeans_iterations.max(1) {
        for (l, &z) in labels.iter_mut().zip(samples) {
            *l = nearest(&centers, z);
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&l, &z) in labels.iter().zip(samples) {
            sums[l] += z;
            counts[l] += 1;
        }
        for c in 0..k {
            centers[c] = if counts[c] > 0 {
                sums[c] / counts[c] as f64
            } else {
                samples[rng.random_range(0..samples.len())]
            };
        }
    }
    for (l, &z) in labels.iter_mut().zip(samples) {
        *l = nearest(&centers, z);
    }
    let assignments: Vec<usize> = labels;
    let fallback = Gmm1d::new(
        centers
            .iter()
            .map(|&mean| GaussianComponent { weight: 1.0 / k as f64, mean, variance: opts.variance_floor })
            .collect(),
    );
    refit_hard(samples, &assignments, &fallback, opts.variance_floor)
}

/// Maximum-likelihood parameters given hard component assignments.
///
/// Components that receive no samples keep their previous mean and variance
/// and get weight 0.
pub fn refit_hard(samples: &[f64], assignments: &[usize], previous: &Gmm1d, variance_floor: f64) -> Gmm1d {
    let k = previous.k();
    let mut count = vec![0usize; k];
    let mut sum = vec![0.0; k];
    for (&a, &z) in assignments.iter().zip(samples) {
        count[a] += 1;
        sum[a] += z;
    }
    let mut sq = vec![0.0; k];
    let means: Vec<f64> = (0..k)
        .map(|c| if count[c] > 0 { sum[c] / count[c] as f64 } else { previous.components[c].mean })
        .collect();
    for (&a, &z) in assignments.iter().zip(samples) {
        let d = z - means[a];
        sq[a] += d * d;
    }
    let n = samples.len().max(1) as f64;
    Gmm1d::new(
        (0..k)
            .map(|c| {
                if count[c] == 0 {
                    GaussianComponent { weight: 0.0, ..previous.components[c] }
                } else {
                    GaussianComponent {
                        weight: count[c] as f64 / n,
                        mean: means[c],
                        variance: (sq[c] / count[c] as f64).max(variance_floor),
                    }
                }
            })
            .collect(),
    )
}

/// Fills `resp` with responsibilities and returns the log-likelihood.
fn e_step(samples: &[f64], model: &Gmm1d, resp: &mut [f64]) -> f64 {
    let k = model.k();
    let mut log_joint = vec![0.0; k];
    let mut ll = 0.0;
    for (n, &z) in samples.iter().enumerate() {
        for (c, lj) in log_joint.iter_mut().enumerate() {
            *lj = model.log_joint(c, z);
        }
        let lse = log_sum_exp(log_joint.iter().copied());
        ll += lse;
        for c in 0..k {
            resp[n * k + c] = (log_joint[c] - lse).exp();
        }
    }
    ll
}

/// EM from an explicit starting model.
///
/// Stops once the relative gain drops to `tolerance`. A step whose
/// likelihood comes out lower (rounding near a fixed point) is discarded,
/// so the returned model always scores the last trace value.
pub fn run_em(samples: &[f64], init: Gmm1d, opts: &EmOptions) -> GmmFit {
    let mut resp = vec![0.0; samples.len() * init.k()];
    let mut model = init;
    let mut ll = e_step(samples, &model, &mut resp);
    let mut trace = vec![ll];
    for _ in 0..opts.max_iterations {
        let next = m_step(samples, &resp, &model, opts.variance_floor);
        let next_ll = e_step(samples, &next, &mut resp);
        if !(next_ll >= ll) {
            break;
        }
        let gain = next_ll - ll;
        model = next;
        ll = next_ll;
        trace.push(ll);
        if gain <= opts.tolerance * ll.abs() {
            break;
        }
    }
    GmmFit { model, log_likelihood: trace }
}

fn m_step(samples: &[f64], resp: &[f64], previous: &Gmm1d, variance_floor: f64) -> Gmm1d {
    let k = previous.k();
    let n = samples.len() as f64;
    let components = (0..k)
        .map(|c| {
            let nk: f64 = (0..samples.len()).map(|i| resp[i * k + c]).sum();
            if nk <= f64::MIN_POSITIVE {
                return GaussianComponent { weight: 0.0, ..previous.components[c] };
            }
            let mean = samples.iter().enumerate().map(|(i, z)| resp[i * k + c] * z).sum::<f64>() / nk;
            let var = samples
                .iter()
                .enumerate()
                .map(|(i, z)| resp[i * k + c] * (z - mean) * (z - mean))
                .sum::<f64>()
                / nk;
            GaussianComponent { weight: nk / n, mean, variance: var.max(variance_floor) }
        })
        .collect();
    Gmm1d::new(components)
}
