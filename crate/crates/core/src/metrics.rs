//! Discrepancies, benchmark statistics, the brute-force posterior oracle and
//! the score normalizers.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::diffusion::{canonical_sum, simulate_uncontrolled, DiffusionModel};
use crate::error::{check_dim, Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::schedules::TimeGrid;
use crate::stein::canonical_order;
use crate::targets::{GaussianMixture, RewardField};

/// Unbiased U-statistic of the kernelized Stein discrepancy with an RBF base
/// kernel of bandwidth `h`, summed over distinct pairs.
pub fn ksd_ustat(samples: ArrayView2<f64>, scores: ArrayView2<f64>, h: f64) -> Result<f64> {
    let (n, d) = samples.dim();
    if n < 2 {
        return Err(Error::domain("KSD needs at least two samples"));
    }
    if scores.dim() != samples.dim() {
        return Err(Error::domain("samples and scores must have the same shape"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::domain(format!("bandwidth must be positive, got {h}")));
    }
    let order = canonical_order(samples, scores);
    let x: Vec<Vec<f64>> = order.iter().map(|&i| samples.row(i).to_vec()).collect();
    let s: Vec<Vec<f64>> = order.iter().map(|&i| scores.row(i).to_vec()).collect();
    let trace_const = 2.0 * d as f64 / h;
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                if j != i {
                    acc += stein_kernel(&x[i], &x[j], &s[i], &s[j], h, trace_const);
                }
            }
            acc
        })
        .collect();
    let total: f64 = row_sums.iter().sum();
    Ok(total / (n as f64 * (n - 1) as f64))
}

/// Stein kernel for RBF `k`, written so swapping the pair is bit-exact.
#[inline]
fn stein_kernel(x: &[f64], y: &[f64], sx: &[f64], sy: &[f64], h: f64, trace_const: f64) -> f64 {
    let mut r2 = 0.0;
    let mut ss = 0.0;
    let mut cross = 0.0;
    for c in 0..x.len() {
        let r = x[c] - y[c];
        r2 += r * r;
        ss += sx[c] * sy[c];
        cross += (sx[c] - sy[c]) * r;
    }
    let k = (-r2 / h).exp();
    k * (ss + 2.0 / h * cross + trace_const - 4.0 * r2 / (h * h))
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    #[serde(skip)]
    pub samples: Array2<f64>,
    pub mean: Vec<f64>,
    /// Row-major `d × d` sample covariance.
    pub cov: Vec<f64>,
    pub mean_stderr: Vec<f64>,
    pub dropped: usize,
    /// False when more than 1% of trajectories were dropped.
    pub valid: bool,
}

pub const MIN_ORACLE_TRAJECTORIES: usize = 1000;

/// Terminal samples of `m` uncontrolled reverse trajectories from `(x_t, t)`.
pub fn bruteforce_posterior_oracle(
    x_t: &[f64],
    t: f64,
    model: &DiffusionModel,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
) -> Result<OracleSummary> {
    if m < MIN_ORACLE_TRAJECTORIES {
        return Err(Error::domain(format!(
            "oracle needs at least {MIN_ORACLE_TRAJECTORIES} trajectories, got {m}"
        )));
    }
    let ends = simulate_uncontrolled(x_t, t, model, grid, m, seed)?;
    let d = model.dim();
    let kept = ends.samples.len();
    if kept < 2 {
        return Err(Error::domain("too few finite trajectories for an estimate"));
    }
    let samples = Array2::from_shape_fn((kept, d), |(i, j)| ends.samples[i][j]);
    let (mean, cov) = moments(samples.view());
    let mean_stderr = (0..d).map(|j| (cov[j * d + j] / kept as f64).sqrt()).collect();
    Ok(OracleSummary {
        samples,
        mean,
        cov,
        mean_stderr,
        dropped: ends.dropped,
        valid: ends.drop_fraction() <= 0.01,
    })
}

/// Sample mean and unbiased row-major covariance.
pub fn moments(samples: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = samples.dim();
    let mean: Vec<f64> = (0..d).map(|j| samples.column(j).sum() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for row in samples.axis_iter(Axis(0)) {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (row[a] - mean[a]) * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    (mean, cov)
}

/// 1-Wasserstein distance between two empirical distributions on the line.
pub fn w1_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return s / a.len() as f64;
    }
    // ∫ |F_a - F_b| over the merged support
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
        prev = next;
    }
    total
}

/// Mean 1-D W1 over `n_dirs` random unit projections drawn from `seed`.
pub fn sliced_w1(a: ArrayView2<f64>, b: ArrayView2<f64>, n_dirs: usize, seed: u64) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::domain("sliced W1 needs nonempty sample sets"));
    }
    check_dim(a.ncols(), b.ncols())?;
    if n_dirs == 0 {
        return Err(Error::domain("n_dirs must be positive"));
    }
    let d = a.ncols();
    let dists: Vec<f64> = (0..n_dirs)
        .into_par_iter()
        .map(|k| {
            let mut u = StreamKey::new(seed, Purpose::Projection, 0, k as u64).normal_vec(d);
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            let pa: Vec<f64> = a.outer_iter().map(|r| r.iter().zip(&u).map(|(x, w)| x * w).sum()).collect();
            let pb: Vec<f64> = b.outer_iter().map(|r| r.iter().zip(&u).map(|(x, w)| x * w).sum()).collect();
            w1_1d(&pa, &pb)
        })
        .collect();
    Ok(dists.iter().sum::<f64>() / n_dirs as f64)
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if v.is_nan() || v == f64::INFINITY {
        return Err(Error::domain(format!("{name} must be a number below +inf, got {v}")));
    }
    Ok(())
}

/// Fraction of rows with `reward ≥ r_thresh` and `log p ≥ ℓ_thresh`.
pub fn hit_fraction(
    samples: ArrayView2<f64>,
    reward: &RewardField,
    r_thresh: f64,
    target: &GaussianMixture,
    l_thresh: f64,
) -> Result<f64> {
    check_threshold("r_thresh", r_thresh)?;
    check_threshold("l_thresh", l_thresh)?;
    check_dim(target.dim(), samples.ncols())?;
    check_dim(reward.dim(), samples.ncols())?;
    if samples.nrows() == 0 {
        return Ok(0.0);
    }
    let hits = samples
        .outer_iter()
        .filter(|r| {
            let x = r.to_vec();
            reward.reward(&x) >= r_thresh && target.log_density_unchecked(&x) >= l_thresh
        })
        .count();
    Ok(hits as f64 / samples.nrows() as f64)
}

/// Fraction of rows with `log p ≥ ℓ_thresh`.
pub fn in_support_fraction(samples: ArrayView2<f64>, target: &GaussianMixture, l_thresh: f64) -> Result<f64> {
    check_threshold("l_thresh", l_thresh)?;
    check_dim(target.dim(), samples.ncols())?;
    if samples.nrows() == 0 {
        return Ok(0.0);
    }
    let ok = samples
        .outer_iter()
        .filter(|r| target.log_density_unchecked(&r.to_vec()) >= l_thresh)
        .count();
    Ok(ok as f64 / samples.nrows() as f64)
}

/// `(10 - SA) / 9` for a synthetic-accessibility score in `[1, 10]`.
pub fn normalize_sa(sa: f64) -> Result<f64> {
    if !(1.0..=10.0).contains(&sa) {
        return Err(Error::domain(format!("SA must lie in [1, 10], got {sa}")));
    }
    Ok((10.0 - sa) / 9.0)
}

/// `DS / (min_train - 0.2)` for docking scores with a negative training minimum.
pub fn normalize_ds(ds: f64, min_train_ds: f64) -> Result<f64> {
    if !(min_train_ds < 0.0) || !ds.is_finite() {
        return Err(Error::domain(format!(
            "docking normalization needs finite DS and min_train < 0, got {ds}, {min_train_ds}"
        )));
    }
    Ok(ds / (min_train_ds - 0.2))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedMetric {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub seed: u64,
    pub step: Option<usize>,
    pub metrics: Vec<NamedMetric>,
}

impl MetricReport {
    pub fn new(config_hash: impl Into<String>, seed: u64, step: Option<usize>) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            step,
            metrics: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, value: f64, stderr: Option<f64>) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::domain(format!("metric {name} is not finite")));
        }
        if let Some(se) = stderr {
            if !(se >= 0.0 && se.is_finite()) {
                return Err(Error::domain(format!("stderr of {name} must be finite and >= 0")));
            }
        }
        self.metrics.push(NamedMetric {
            name: name.to_string(),
            value,
            stderr,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = canonical_sum(values.to_vec()) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
