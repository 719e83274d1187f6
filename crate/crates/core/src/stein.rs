//! RBF kernel machinery, the KSD steepest-descent direction and the Stein
//! correction of clean estimates, with the back-and-forth renoising step.

use std::cmp::Ordering;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    batch_scores, batch_tweedie, canonical_sum, conditional_scores, mean_row_norm,
    DiffusionModel, LevelCoeffs, ParticleBatch, ScoreSource,
};
use crate::error::{check_dim, Error, Result};
use crate::metrics::ksd_ustat;
use crate::rng::{Purpose, StreamKey};
use crate::targets::{sq_dist, GaussianMixture};

/// `exp(-‖x - y‖² / h)`.
pub fn rbf_kernel(x: &[f64], y: &[f64], h: f64) -> Result<f64> {
    check_bandwidth(h)?;
    check_dim(x.len(), y.len())?;
    Ok((-sq_dist(x, y) / h).exp())
}

/// `∇_y k(x, y) = -(2/h)(y - x) k(x, y)`.
pub fn rbf_grad_second_arg(x: &[f64], y: &[f64], h: f64) -> Result<Vec<f64>> {
    let k = rbf_kernel(x, y, h)?;
    Ok(x.iter().zip(y).map(|(a, b)| -2.0 / h * (b - a) * k).collect())
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("bandwidth must be positive, got {h}")))
    }
}

/// Median heuristic `med² / log(N + 1)` over pairwise distances; 1 when the
/// median distance is zero or there are no pairs.
pub fn median_bandwidth(points: ArrayView2<f64>) -> f64 {
    let n = points.nrows();
    if n < 2 {
        return 1.0;
    }
    let rows: Vec<Vec<f64>> = points.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let mut d2: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d2.push(sq_dist(&rows[i], &rows[j]));
        }
    }
    let m = d2.len();
    let mid = m / 2;
    let (_, upper, _) = d2.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let med_sq = if m % 2 == 1 {
        upper
    } else {
        let lower = d2[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // median of distances, then squared
        let med = 0.5 * (lower.sqrt() + upper.sqrt());
        med * med
    };
    if med_sq <= 0.0 || !med_sq.is_finite() {
        return 1.0;
    }
    med_sq / ((n + 1) as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

impl Bandwidth {
    pub fn resolve(&self, points: ArrayView2<f64>) -> f64 {
        match *self {
            Bandwidth::Median => median_bandwidth(points),
            Bandwidth::Fixed(h) => h,
        }
    }
}

/// Row order that depends only on the row contents, so reductions over
/// particles are bit-identical under any permutation of the batch.
pub(crate) fn canonical_order(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| {
        a.row(i)
            .iter()
            .chain(b.row(i).iter())
            .zip(a.row(j).iter().chain(b.row(j).iter()))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// `φ*(x_i) = (1/N) Σ_j [s_j k(x_i, x_j) + ∇_{x_j} k(x_i, x_j)]`.
pub fn ksd_direction(points: ArrayView2<f64>, scores: ArrayView2<f64>, h: f64) -> Result<Array2<f64>> {
    check_bandwidth(h)?;
    if points.dim() != scores.dim() {
        return Err(Error::domain("points and scores must have the same shape"));
    }
    let (n, d) = points.dim();
    let order = canonical_order(points, scores);
    let rows: Vec<Vec<f64>> = points.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let srows: Vec<Vec<f64>> = scores.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let inv_n = 1.0 / n as f64;
    let two_over_h = 2.0 / h;
    let mut out = Array2::zeros((n, d));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let xi = &rows[i];
            let mut acc = vec![0.0; d];
            for &j in &order {
                let xj = &rows[j];
                let k = (-sq_dist(xi, xj) / h).exp();
                let sj = &srows[j];
                for c in 0..d {
                    acc[c] += sj[c] * k + two_over_h * (xi[c] - xj[c]) * k;
                }
            }
            for c in 0..d {
                row[c] = acc[c] * inv_n;
            }
        });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renoise {
    /// Leave `x_t` as is.
    Off,
    /// `x_t ← η x_T + γ z` with a fresh draw `z`.
    Fresh,
    /// `x_t ← η x_T + γ ẑ` reusing the noise `ẑ = (x_t - η x̂_T) / γ` implied
    /// by the pre-correction Tweedie estimate; the identity when nothing moved.
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteinConfig {
    pub bandwidth: Bandwidth,
    pub n_corrector_steps: usize,
    pub score_source: ScoreSource,
    /// How `x_t` is regenerated from the corrected estimates.
    pub renoise: Renoise,
    /// Forces `ε` instead of the adaptive schedule.
    pub epsilon_override: Option<f64>,
    /// Compute KSD against the exact posterior before and after each correction.
    pub track_ksd: bool,
    /// Caps `ε` so the mean displacement `ε ‖φ*‖` is at most this multiple
    /// of the kernel length `√h`.
    pub trust_radius: Option<f64>,
}

impl Default for SteinConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            n_corrector_steps: 1,
            score_source: ScoreSource::Surrogate,
            renoise: Renoise::Off,
            epsilon_override: None,
            track_ksd: false,
            trust_radius: Some(0.5),
        }
    }
}

impl SteinConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            check_bandwidth(h)?;
        }
        if self.n_corrector_steps == 0 {
            return Err(Error::domain("n_corrector_steps must be at least 1"));
        }
        if let Some(r) = self.trust_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::domain("trust_radius must be positive"));
            }
        }
        if let Some(e) = self.epsilon_override {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::domain("epsilon_override must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Per-block, per-corrector-step diagnostics (last corrector step wins).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteinDiagnostics {
    pub epsilon: f64,
    pub bandwidth: f64,
    pub phi_norm: f64,
    pub ksd_before: Option<f64>,
    pub ksd_after: Option<f64>,
}

fn exact_cond_block(
    clean: ArrayView2<f64>,
    noisy: ArrayView2<f64>,
    coeffs: &LevelCoeffs,
    target: &GaussianMixture,
    marginal: &GaussianMixture,
    cols: std::ops::Range<usize>,
) -> Array2<f64> {
    conditional_scores(clean, noisy, coeffs, target, marginal, ScoreSource::ExactConditional)
        .slice(s![.., cols])
        .to_owned()
}

/// Replaces the clean estimates with Tweedie means at time `t`, then applies
/// `n_corrector_steps` Stein updates `x_T ← x_T + ε φ*` on each block.
/// The noisy states are untouched.
pub fn stein_correct(
    batch: &ParticleBatch,
    model: &DiffusionModel,
    t: f64,
    cfg: &SteinConfig,
) -> Result<(ParticleBatch, Vec<SteinDiagnostics>)> {
    let (coeffs, marginal) = model.marginal(t)?;
    let scores = batch_scores(batch.noisy.view(), &marginal);
    let clean = batch_tweedie(batch.noisy.view(), scores.view(), &coeffs)?;
    let mut out = batch.clone();
    out.clean = clean;
    let diags = correct_in_place(&mut out, model, &coeffs, &marginal, cfg)?;
    Ok((out, diags))
}

/// Stein updates on `batch.clean` given the level at the batch's time.
pub(crate) fn correct_in_place(
    batch: &mut ParticleBatch,
    model: &DiffusionModel,
    coeffs: &LevelCoeffs,
    marginal: &GaussianMixture,
    cfg: &SteinConfig,
) -> Result<Vec<SteinDiagnostics>> {
    let active = vec![true; model.layout.blocks().len()];
    correct_blocks(batch, model, coeffs, marginal, cfg, &active)
}

/// As [`correct_in_place`], touching only the blocks flagged in `active`.
/// Skipped blocks report zero `ε` and a NaN bandwidth.
pub(crate) fn correct_blocks(
    batch: &mut ParticleBatch,
    model: &DiffusionModel,
    coeffs: &LevelCoeffs,
    marginal: &GaussianMixture,
    cfg: &SteinConfig,
    active: &[bool],
) -> Result<Vec<SteinDiagnostics>> {
    let n = batch.len();
    let blocks = model.layout.blocks();
    let mut diags = vec![
        SteinDiagnostics {
            epsilon: 0.0,
            bandwidth: f64::NAN,
            phi_norm: 0.0,
            ksd_before: None,
            ksd_after: None,
        };
        blocks.len()
    ];
    for sub in 0..cfg.n_corrector_steps {
        let cond = conditional_scores(
            batch.clean.view(),
            batch.noisy.view(),
            coeffs,
            &model.target,
            marginal,
            cfg.score_source,
        );
        let mut updates = Vec::with_capacity(blocks.len());
        for (bi, b) in blocks.iter().enumerate() {
            if !active[bi] {
                continue;
            }
            let cols = b.cols.clone();
            let xb = batch.clean.slice(s![.., cols.clone()]);
            let sb = cond.slice(s![.., cols.clone()]);
            let h = cfg.bandwidth.resolve(xb);
            let epsilon = match cfg.epsilon_override {
                Some(e) => e,
                None => {
                    let z_norms: Vec<f64> = batch
                        .ids
                        .iter()
                        .map(|&id| {
                            let z = StreamKey::new(batch.seed, Purpose::EpsilonNoise, batch.step as u64, id)
                                .with_block(b.tag)
                                .with_sub(sub as u32)
                                .normal_vec(b.dim());
                            z.iter().map(|v| v * v).sum::<f64>().sqrt()
                        })
                        .collect();
                    let z_norm = canonical_sum(z_norms) / n as f64;
                    let g_norm = mean_row_norm(cond.view(), cols.clone());
                    b.guidance.epsilon_at(coeffs.eta[cols.start], z_norm, g_norm)
                }
            };
            let phi = ksd_direction(xb, sb, h)?;
            let phi_norm = mean_row_norm(phi.view(), 0..b.dim());
            let epsilon = match (cfg.epsilon_override, cfg.trust_radius) {
                (None, Some(r)) if phi_norm > 0.0 => epsilon.min(r * h.sqrt() / phi_norm),
                _ => epsilon,
            };
            let ksd_before = if cfg.track_ksd && n >= 2 {
                let e = exact_cond_block(
                    batch.clean.view(),
                    batch.noisy.view(),
                    coeffs,
                    &model.target,
                    marginal,
                    cols.clone(),
                );
                Some(ksd_ustat(xb, e.view(), h)?)
            } else {
                None
            };
            diags[bi] = SteinDiagnostics {
                epsilon,
                bandwidth: h,
                phi_norm,
                ksd_before,
                ksd_after: None,
            };
            updates.push((cols, epsilon, phi));
        }
        // all block directions come from the frozen scores above
        for (cols, epsilon, phi) in updates {
            let mut xb = batch.clean.slice_mut(s![.., cols]);
            xb.zip_mut_with(&phi, |x, p| *x += epsilon * p);
        }
        if cfg.track_ksd && n >= 2 {
            for (bi, b) in blocks.iter().enumerate().filter(|(bi, _)| active[*bi]) {
                let e = exact_cond_block(
                    batch.clean.view(),
                    batch.noisy.view(),
                    coeffs,
                    &model.target,
                    marginal,
                    b.cols.clone(),
                );
                let xb = batch.clean.slice(s![.., b.cols.clone()]);
                diags[bi].ksd_after = Some(ksd_ustat(xb, e.view(), diags[bi].bandwidth)?);
            }
        }
    }
    for (i, row) in batch.clean.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: batch.step,
                particle: i,
            });
        }
    }
    Ok(diags)
}

/// Regenerates `x_t` from the corrected clean estimates. `tweedie` holds the
/// estimates before correction (used by [`Renoise::Paired`]). Only blocks
/// flagged in `active` are regenerated.
pub(crate) fn renoise_in_place(
    batch: &mut ParticleBatch,
    model: &DiffusionModel,
    coeffs: &LevelCoeffs,
    tweedie: &Array2<f64>,
    mode: Renoise,
    active: &[bool],
) {
    let d = batch.dim();
    let seed = batch.seed;
    let step = batch.step as u64;
    let blocks = model.layout.blocks();
    let clean = &batch.clean;
    let ids = &batch.ids;
    match mode {
        Renoise::Off => {}
        Renoise::Paired => {
            batch
                .noisy
                .axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(i, mut row)| {
                    for (b, _) in blocks.iter().zip(active).filter(|(_, a)| **a) {
                        for j in b.cols.clone() {
                            row[j] += coeffs.eta[j] * (clean[[i, j]] - tweedie[[i, j]]);
                        }
                    }
                });
        }
        Renoise::Fresh => {
            batch
                .noisy
                .axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(i, mut row)| {
                    let mut z = vec![0.0; d];
                    for (b, _) in blocks.iter().zip(active).filter(|(_, a)| **a) {
                        StreamKey::new(seed, Purpose::Renoise, step, ids[i])
                            .with_block(b.tag)
                            .fill_normal(&mut z[b.cols.clone()]);
                        for j in b.cols.clone() {
                            row[j] = coeffs.eta[j] * clean[[i, j]] + coeffs.gamma[j] * z[j];
                        }
                    }
                });
        }
    }
}

/// Stein correction on the clean manifold followed by regeneration of the
/// noisy states from the corrected estimates according to `cfg.renoise`.
pub fn back_and_forth(
    batch: &ParticleBatch,
    model: &DiffusionModel,
    t: f64,
    cfg: &SteinConfig,
) -> Result<(ParticleBatch, Vec<SteinDiagnostics>)> {
    let (coeffs, marginal) = model.marginal(t)?;
    let scores = batch_scores(batch.noisy.view(), &marginal);
    let mut out = batch.clone();
    let tweedie = batch_tweedie(batch.noisy.view(), scores.view(), &coeffs)?;
    out.clean = tweedie.clone();
    let diags = correct_in_place(&mut out, model, &coeffs, &marginal, cfg)?;
    let active = vec![true; model.layout.blocks().len()];
    renoise_in_place(&mut out, model, &coeffs, &tweedie, cfg.renoise, &active);
    Ok((out, diags))
}

/// Plain SVGD against a fixed density: `iters` updates of step `step` with
/// the given bandwidth policy.
pub fn svgd(
    initial: Array2<f64>,
    target: &GaussianMixture,
    bandwidth: Bandwidth,
    step: f64,
    iters: usize,
) -> Result<Array2<f64>> {
    check_dim(target.dim(), initial.ncols())?;
    let mut x = initial;
    for _ in 0..iters {
        let scores = batch_scores(x.view(), target);
        let h = bandwidth.resolve(x.view());
        let phi = ksd_direction(x.view(), scores.view(), h)?;
        x.zip_mut_with(&phi, |a, p| *a += step * p);
    }
    Ok(x)
}
