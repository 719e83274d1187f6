//! Forward perturbation, Tweedie estimation, conditional scores and reverse
//! SDE stepping.
//!
//! A [`DiffusionModel`] pairs an analytic target with a [`Layout`]: a split of
//! the coordinates into blocks, each carrying its own noise schedule and
//! guidance schedules. The single-component case is one block spanning all
//! coordinates, so every operation here is written per coordinate.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::schedules::{GuidanceSchedules, Kernel, NoiseSchedule, TimeGrid};
use crate::targets::{GaussianMixture, RewardField};

/// Tweedie is refused below this signal level.
pub const TWEEDIE_ETA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub cols: Range<usize>,
    pub sched: NoiseSchedule,
    pub guidance: GuidanceSchedules,
    /// Distinguishes the random streams of different blocks.
    pub tag: u32,
}

impl Block {
    pub fn dim(&self) -> usize {
        self.cols.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    dim: usize,
    blocks: Vec<Block>,
}

impl Layout {
    pub fn single(dim: usize, sched: NoiseSchedule, guidance: GuidanceSchedules) -> Self {
        Self {
            dim,
            blocks: vec![Block {
                cols: 0..dim,
                sched,
                guidance,
                tag: 0,
            }],
        }
    }

    /// Blocks must tile `0..dim` in order; empty blocks are dropped.
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let blocks: Vec<Block> = blocks.into_iter().filter(|b| b.dim() > 0).collect();
        if blocks.is_empty() {
            return Err(Error::domain("layout needs at least one non-empty block"));
        }
        let mut next = 0;
        for b in &blocks {
            if b.cols.start != next {
                return Err(Error::domain("blocks must tile the coordinates in order"));
            }
            next = b.cols.end;
        }
        let horizon = blocks[0].sched.horizon;
        if blocks.iter().any(|b| b.sched.horizon != horizon) {
            return Err(Error::domain("all blocks must share the time horizon"));
        }
        Ok(Self { dim: next, blocks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Guidance schedules of every block, in order.
    pub fn guidance_mut(&mut self) -> impl Iterator<Item = &mut GuidanceSchedules> {
        self.blocks.iter_mut().map(|b| &mut b.guidance)
    }

    pub fn horizon(&self) -> f64 {
        self.blocks[0].sched.horizon
    }

    pub fn coeffs(&self, t: f64) -> Result<LevelCoeffs> {
        let d = self.dim;
        let mut c = LevelCoeffs {
            eta: vec![0.0; d],
            gamma: vec![0.0; d],
            drift: vec![0.0; d],
            sigma: vec![0.0; d],
            gamma_floor: f64::INFINITY,
        };
        for b in &self.blocks {
            let k = b.sched.eta_gamma(t)?;
            let (drift, sigma) = b.sched.drift_coeff_diffusion(t)?;
            for i in b.cols.clone() {
                c.eta[i] = k.eta;
                c.gamma[i] = k.gamma;
                c.drift[i] = drift;
                c.sigma[i] = sigma;
            }
            c.gamma_floor = c.gamma_floor.min(b.sched.gamma_floor);
        }
        Ok(c)
    }
}

/// Per-coordinate kernel and SDE coefficients at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCoeffs {
    pub eta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `b(x, t) = drift ⊙ x`
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma_floor: f64,
}

#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub target: GaussianMixture,
    pub layout: Layout,
}

impl DiffusionModel {
    pub fn new(target: GaussianMixture, sched: NoiseSchedule, guidance: GuidanceSchedules) -> Self {
        let layout = Layout::single(target.dim(), sched, guidance);
        Self { target, layout }
    }

    pub fn with_layout(target: GaussianMixture, layout: Layout) -> Result<Self> {
        check_dim(target.dim(), layout.dim())?;
        Ok(Self { target, layout })
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.layout.horizon()
    }

    /// Closed-form marginal at `t` with the blockwise kernel.
    pub fn marginal(&self, t: f64) -> Result<(LevelCoeffs, GaussianMixture)> {
        let c = self.layout.coeffs(t)?;
        let m = self.target.perturbed(&c.eta, &c.gamma)?;
        Ok((c, m))
    }

    /// Isotropic Gaussian prior used to initialize particles at `t = 0`.
    pub fn prior_std(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for b in self.layout.blocks() {
            let s = b.sched.prior_std();
            for i in b.cols.clone() {
                out[i] = s;
            }
        }
        out
    }
}

/// `N` particles: noisy states `x_t` and paired clean estimates `x_T`.
/// Row `i` of both matrices is particle `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleBatch {
    pub step: usize,
    pub seed: u64,
    pub ids: Vec<u64>,
    pub noisy: Array2<f64>,
    pub clean: Array2<f64>,
}

impl ParticleBatch {
    pub fn new(step: usize, seed: u64, noisy: Array2<f64>) -> Result<Self> {
        let n = noisy.nrows();
        if n == 0 {
            return Err(Error::domain("a batch needs at least one particle"));
        }
        let clean = noisy.clone();
        Ok(Self {
            step,
            seed,
            ids: (0..n as u64).collect(),
            noisy,
            clean,
        })
    }

    /// Samples `x_0` from the isotropic prior.
    pub fn from_prior(model: &DiffusionModel, n: usize, seed: u64) -> Result<Self> {
        let d = model.dim();
        let std = model.prior_std();
        let mut noisy = Array2::zeros((n, d));
        noisy
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut row)| {
                let mut z = vec![0.0; d];
                for b in model.layout.blocks() {
                    StreamKey::new(seed, Purpose::Prior, 0, i as u64)
                        .with_block(b.tag)
                        .fill_normal(&mut z[b.cols.clone()]);
                }
                for j in 0..d {
                    row[j] = std[j] * z[j];
                }
            });
        Self::new(0, seed, noisy)
    }

    pub fn len(&self) -> usize {
        self.noisy.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.noisy.ncols()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, (a, b)) in self
            .noisy
            .axis_iter(Axis(0))
            .zip(self.clean.axis_iter(Axis(0)))
            .enumerate()
        {
            if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: self.step,
                    particle: i,
                });
            }
        }
        Ok(())
    }

    /// Reorders rows (and ids) so that row `i` of the result is row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            step: self.step,
            seed: self.seed,
            ids: perm.iter().map(|&p| self.ids[p]).collect(),
            noisy: self.noisy.select(Axis(0), perm),
            clean: self.clean.select(Axis(0), perm),
        }
    }
}

/// `η x_T + γ z`.
pub fn forward_perturb(x_clean: &[f64], sched: &NoiseSchedule, t: f64, z: &[f64]) -> Result<Vec<f64>> {
    check_dim(x_clean.len(), z.len())?;
    let k = sched.eta_gamma(t)?;
    Ok(x_clean
        .iter()
        .zip(z)
        .map(|(x, zz)| k.eta * x + k.gamma * zz)
        .collect())
}

fn check_eta(eta: &[f64]) -> Result<()> {
    match eta.iter().copied().find(|e| !(*e >= TWEEDIE_ETA_FLOOR)) {
        Some(e) => Err(Error::domain(format!(
            "eta {e:e} below Tweedie floor {TWEEDIE_ETA_FLOOR:e}"
        ))),
        None => Ok(()),
    }
}

/// Tweedie posterior mean `(x_t + γ² s) / η`.
pub fn tweedie_mean(x_t: &[f64], sched: &NoiseSchedule, t: f64, score: &[f64]) -> Result<Vec<f64>> {
    check_dim(x_t.len(), score.len())?;
    let k = sched.eta_gamma(t)?;
    let d = x_t.len();
    tweedie_coords(x_t, &vec![k.eta; d], &vec![k.gamma; d], score)
}

pub fn tweedie_coords(x_t: &[f64], eta: &[f64], gamma: &[f64], score: &[f64]) -> Result<Vec<f64>> {
    check_eta(eta)?;
    let mut out = vec![0.0; x_t.len()];
    tweedie_into(x_t, eta, gamma, score, &mut out);
    Ok(out)
}

#[inline]
fn tweedie_into(x_t: &[f64], eta: &[f64], gamma: &[f64], score: &[f64], out: &mut [f64]) {
    for i in 0..x_t.len() {
        out[i] = (x_t[i] + gamma[i] * gamma[i] * score[i]) / eta[i];
    }
}

/// Jacobian of the Tweedie map, `(I + γ² H) / η` (row-major).
pub fn tweedie_jacobian(
    x_t: &[f64],
    sched: &NoiseSchedule,
    t: f64,
    score_hessian: &[f64],
) -> Result<Vec<f64>> {
    let d = x_t.len();
    check_dim(d * d, score_hessian.len())?;
    let k = sched.eta_gamma(t)?;
    tweedie_jacobian_coords(&vec![k.eta; d], &vec![k.gamma; d], score_hessian)
}

pub fn tweedie_jacobian_coords(eta: &[f64], gamma: &[f64], score_hessian: &[f64]) -> Result<Vec<f64>> {
    check_eta(eta)?;
    let d = eta.len();
    let mut j = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let id = if a == b { 1.0 } else { 0.0 };
            j[a * d + b] = (id + gamma[a] * gamma[a] * score_hessian[a * d + b]) / eta[a];
        }
    }
    Ok(j)
}

/// Surrogate `∇_{x_T} log p(x_T | x_t) ≈ s(x_T) - η s_t(x_t)`: the clean score
/// at the estimate minus the scaled noisy score at the state.
pub fn conditional_score_surrogate(
    x_clean: &[f64],
    x_t: &[f64],
    eta: &[f64],
    clean: &GaussianMixture,
    noisy: &GaussianMixture,
) -> Vec<f64> {
    let mut out = vec![0.0; x_clean.len()];
    let mut tmp = vec![0.0; x_clean.len()];
    surrogate_into(x_clean, x_t, eta, clean, noisy, &mut out, &mut tmp);
    out
}

#[inline]
fn surrogate_into(
    x_clean: &[f64],
    x_t: &[f64],
    eta: &[f64],
    clean: &GaussianMixture,
    noisy: &GaussianMixture,
    out: &mut [f64],
    tmp: &mut [f64],
) {
    clean.score_into(x_clean, out);
    noisy.score_into(x_t, tmp);
    for i in 0..out.len() {
        out[i] -= eta[i] * tmp[i];
    }
}

/// Exact `∇_{x_T} log p(x_T | x_t) = η (x_t - η x_T) / γ² + s(x_T)`.
pub fn exact_conditional_score(
    x_clean: &[f64],
    x_t: &[f64],
    eta: &[f64],
    gamma: &[f64],
    clean: &GaussianMixture,
) -> Vec<f64> {
    let mut out = vec![0.0; x_clean.len()];
    exact_conditional_into(x_clean, x_t, eta, gamma, clean, &mut out);
    out
}

#[inline]
fn exact_conditional_into(
    x_clean: &[f64],
    x_t: &[f64],
    eta: &[f64],
    gamma: &[f64],
    clean: &GaussianMixture,
    out: &mut [f64],
) {
    clean.score_into(x_clean, out);
    for i in 0..out.len() {
        out[i] += eta[i] * (x_t[i] - eta[i] * x_clean[i]) / (gamma[i] * gamma[i]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Surrogate,
    ExactConditional,
}

/// Conditional scores for every particle pair `(x_T^i, x_t^i)`.
pub fn conditional_scores(
    clean_batch: ArrayView2<f64>,
    noisy_batch: ArrayView2<f64>,
    coeffs: &LevelCoeffs,
    target: &GaussianMixture,
    noisy_marginal: &GaussianMixture,
    source: ScoreSource,
) -> Array2<f64> {
    let (n, d) = clean_batch.dim();
    let mut out = Array2::zeros((n, d));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let xc = clean_batch.row(i).to_vec();
            let xt = noisy_batch.row(i).to_vec();
            let mut buf = vec![0.0; d];
            let mut tmp = vec![0.0; d];
            match source {
                ScoreSource::Surrogate => surrogate_into(
                    &xc,
                    &xt,
                    &coeffs.eta,
                    target,
                    noisy_marginal,
                    &mut buf,
                    &mut tmp,
                ),
                ScoreSource::ExactConditional => {
                    exact_conditional_into(&xc, &xt, &coeffs.eta, &coeffs.gamma, target, &mut buf)
                }
            }
            row.assign(&ndarray::ArrayView1::from(&buf[..]));
        });
    out
}

/// Scores of a marginal at every row.
pub fn batch_scores(points: ArrayView2<f64>, density: &GaussianMixture) -> Array2<f64> {
    let (n, d) = points.dim();
    let mut out = Array2::zeros((n, d));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let x = points.row(i).to_vec();
            let mut buf = vec![0.0; d];
            density.score_into(&x, &mut buf);
            row.assign(&ndarray::ArrayView1::from(&buf[..]));
        });
    out
}

/// Tweedie estimates for every row given its score.
pub fn batch_tweedie(
    noisy: ArrayView2<f64>,
    scores: ArrayView2<f64>,
    coeffs: &LevelCoeffs,
) -> Result<Array2<f64>> {
    check_eta(&coeffs.eta)?;
    let (n, d) = noisy.dim();
    let mut out = Array2::zeros((n, d));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let x = noisy.row(i).to_vec();
            let s = scores.row(i).to_vec();
            let mut buf = vec![0.0; d];
            tweedie_into(&x, &coeffs.eta, &coeffs.gamma, &s, &mut buf);
            row.assign(&ndarray::ArrayView1::from(&buf[..]));
        });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pullback {
    /// `Jᵀ ∇r(x̂)` with the exact Tweedie Jacobian.
    Exact,
    /// `∇r(x̂) / η`, treating the score as constant.
    Detached,
}

/// `∇_{x_t} r(x̂_T(x_t))` for one particle.
pub fn reward_pullback(
    x_t: &[f64],
    x_clean: &[f64],
    coeffs: &LevelCoeffs,
    noisy_marginal: &GaussianMixture,
    reward: &RewardField,
    mode: Pullback,
) -> Result<Vec<f64>> {
    let g = reward.reward_grad(x_clean);
    let d = x_t.len();
    match mode {
        Pullback::Detached => Ok((0..d).map(|i| g[i] / coeffs.eta[i]).collect()),
        Pullback::Exact => {
            let h = noisy_marginal.score_hessian(x_t)?;
            let j = tweedie_jacobian_coords(&coeffs.eta, &coeffs.gamma, &h)?;
            Ok((0..d)
                .map(|b| (0..d).map(|a| j[a * d + b] * g[a]).sum())
                .collect())
        }
    }
}

/// Per-coordinate guidance weights plus each particle's reward pullback.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub reward_pullback: Array2<f64>,
}

impl Guidance {
    pub fn none(n: usize, d: usize) -> Self {
        Self {
            alpha: vec![0.0; d],
            beta: vec![0.0; d],
            reward_pullback: Array2::zeros((n, d)),
        }
    }
}

/// Sum that does not depend on the order of `values`.
pub fn canonical_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Mean over rows of the Euclidean norm restricted to `cols`.
pub fn mean_row_norm(m: ArrayView2<f64>, cols: Range<usize>) -> f64 {
    let n = m.nrows();
    let norms: Vec<f64> = m
        .axis_iter(Axis(0))
        .map(|r| cols.clone().map(|j| r[j] * r[j]).sum::<f64>().sqrt())
        .collect();
    canonical_sum(norms) / n as f64
}

/// One Euler–Maruyama step of the reverse SDE from grid index `batch.step`:
/// `x ← x + [-b + σ²((1-α) s + β g_r)] Δt + σ √Δt z`.
///
/// With `guidance = None` this is the uncontrolled reverse step. The clean
/// estimates are carried over unchanged.
pub fn reverse_step(
    batch: &ParticleBatch,
    model: &DiffusionModel,
    grid: &TimeGrid,
    guidance: Option<&Guidance>,
) -> Result<ParticleBatch> {
    let k = batch.step;
    if k >= grid.num_steps {
        return Err(Error::domain(format!("step {k} is past the last grid index")));
    }
    let t = grid.time(k);
    let (coeffs, marginal) = model.marginal(t)?;
    let scores = batch_scores(batch.noisy.view(), &marginal);
    reverse_step_with(batch, model, grid, &coeffs, scores.view(), guidance)
}

pub(crate) fn reverse_step_with(
    batch: &ParticleBatch,
    model: &DiffusionModel,
    grid: &TimeGrid,
    coeffs: &LevelCoeffs,
    scores: ArrayView2<f64>,
    guidance: Option<&Guidance>,
) -> Result<ParticleBatch> {
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let d = batch.dim();
    let mut next = batch.noisy.clone();
    let step = batch.step as u64;
    let seed = batch.seed;
    let ids = &batch.ids;
    let blocks = model.layout.blocks();
    next.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let mut z = vec![0.0; d];
            for b in blocks {
                StreamKey::new(seed, Purpose::StepNoise, step, ids[i])
                    .with_block(b.tag)
                    .fill_normal(&mut z[b.cols.clone()]);
            }
            for j in 0..d {
                let x = row[j];
                let s = scores[[i, j]];
                let sig2 = coeffs.sigma[j] * coeffs.sigma[j];
                let force = match guidance {
                    None => s,
                    Some(g) => (1.0 - g.alpha[j]) * s + g.beta[j] * g.reward_pullback[[i, j]],
                };
                let drift = -coeffs.drift[j] * x + sig2 * force;
                row[j] = x + drift * dt + coeffs.sigma[j] * sqrt_dt * z[j];
            }
        });
    let out = ParticleBatch {
        step: batch.step + 1,
        seed,
        ids: batch.ids.clone(),
        noisy: next,
        clean: batch.clean.clone(),
    };
    for (i, row) in out.noisy.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: batch.step,
                particle: i,
            });
        }
    }
    Ok(out)
}

/// Terminal samples of uncontrolled reverse trajectories started at `x` at time `t0`.
#[derive(Debug, Clone)]
pub struct TrajectoryEnds {
    /// Finite terminal states, in trajectory order.
    pub samples: Vec<Vec<f64>>,
    /// Index of each kept trajectory.
    pub kept: Vec<usize>,
    pub dropped: usize,
}

impl TrajectoryEnds {
    pub fn drop_fraction(&self) -> f64 {
        let total = self.samples.len() + self.dropped;
        self.dropped as f64 / total.max(1) as f64
    }
}

/// Simulates `m` uncontrolled Euler–Maruyama trajectories from `(x, t0)` to
/// the data end. Steps are at most `grid.dt()` long and evenly split the
/// remaining interval. Trajectory `j` uses the stream `(seed, Trajectory, step, j)`.
pub fn simulate_uncontrolled(
    x: &[f64],
    t0: f64,
    model: &DiffusionModel,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
) -> Result<TrajectoryEnds> {
    let d = model.dim();
    check_dim(d, x.len())?;
    let horizon = model.horizon();
    if !(t0 >= 0.0 && t0 <= horizon) {
        return Err(Error::domain(format!("start time {t0} outside [0, {horizon}]")));
    }
    let remaining = horizon - t0;
    let n_steps = ((remaining / grid.dt()) - 1e-9).ceil().max(0.0) as usize;
    let h = if n_steps > 0 { remaining / n_steps as f64 } else { 0.0 };
    let mut states = Array2::from_shape_fn((m, d), |(_, j)| x[j]);
    let mut alive = vec![true; m];
    for step in 0..n_steps {
        let t = if step == 0 { t0 } else { t0 + step as f64 * h };
        let (c, marginal) = model.marginal(t.min(horizon))?;
        let sqrt_h = h.sqrt();
        states
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(alive.par_iter_mut())
            .enumerate()
            .for_each(|(j, (mut row, ok))| {
                if !*ok {
                    return;
                }
                let xs = row.to_vec();
                let mut s = vec![0.0; d];
                marginal.score_into(&xs, &mut s);
                let z = StreamKey::new(seed, Purpose::Trajectory, step as u64, j as u64).normal_vec(d);
                for i in 0..d {
                    let drift = -c.drift[i] * xs[i] + c.sigma[i] * c.sigma[i] * s[i];
                    row[i] = xs[i] + drift * h + c.sigma[i] * sqrt_h * z[i];
                }
                if row.iter().any(|v| !v.is_finite()) {
                    *ok = false;
                }
            });
    }
    let mut samples = Vec::with_capacity(m);
    let mut kept = Vec::with_capacity(m);
    for (j, row) in states.axis_iter(Axis(0)).enumerate() {
        if alive[j] {
            samples.push(row.to_vec());
            kept.push(j);
        }
    }
    Ok(TrajectoryEnds {
        dropped: m - samples.len(),
        samples,
        kept,
    })
}

/// Kernel for a single schedule at `t` (convenience for scalar callers).
pub fn kernel_at(sched: &NoiseSchedule, t: f64) -> Result<Kernel> {
    sched.eta_gamma(t)
}
