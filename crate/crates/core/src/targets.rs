//! Analytic targets: Gaussian mixtures with exact log-density, score, Hessian,
//! closed-form noisy marginals and exact diffusion posteriors, plus
//! differentiable reward fields.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{check_dim, Error, Result};
use crate::schedules::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

type Logits = SmallVec<[f64; 8]>;

#[derive(Debug, Clone)]
struct Component {
    mean: Vec<f64>,
    /// Row-major covariance.
    cov: Vec<f64>,
    /// Row-major lower Cholesky factor of `cov`.
    chol: Vec<f64>,
    /// Row-major precision `cov^{-1}`.
    prec: Vec<f64>,
    /// `-½ (d log 2π + log det cov)`.
    log_norm: f64,
}

/// Finite mixture of full-covariance Gaussians in `R^d`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    comps: Vec<Component>,
}

impl PartialEq for GaussianMixture {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.weights == other.weights
            && self.comps.len() == other.comps.len()
            && self
                .comps
                .iter()
                .zip(&other.comps)
                .all(|(a, b)| a.mean == b.mean && a.cov == b.cov)
    }
}

impl Component {
    fn new(mean: Vec<f64>, cov: Vec<f64>, index: usize) -> Result<Self> {
        let d = mean.len();
        check_dim(d * d, cov.len())?;
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (cov[i * d + j], cov[j * d + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::domain(format!("covariance {index} is not symmetric")));
                }
            }
        }
        let m = DMatrix::from_row_slice(d, d, &cov);
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::domain(format!("covariance {index} is not positive definite")))?;
        let l = chol.l();
        let prec = chol.inverse();
        let log_det: f64 = (0..d).map(|i| 2.0 * l[(i, i)].ln()).sum();
        let mut l_rows = vec![0.0; d * d];
        let mut p_rows = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                l_rows[i * d + j] = l[(i, j)];
                // symmetrize the inverse so Hessians stay exactly symmetric
                p_rows[i * d + j] = 0.5 * (prec[(i, j)] + prec[(j, i)]);
            }
        }
        Ok(Self {
            mean,
            cov,
            chol: l_rows,
            prec: p_rows,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    #[inline]
    fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut quad = 0.0;
        for i in 0..d {
            let di = x[i] - self.mean[i];
            let row = &self.prec[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += row[j] * (x[j] - self.mean[j]);
            }
            quad += di * acc;
        }
        self.log_norm - 0.5 * quad
    }

    /// `-P (x - μ)` accumulated as `out += scale * (-P (x - μ))`.
    #[inline]
    fn add_grad(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.mean.len();
        for i in 0..d {
            let row = &self.prec[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += row[j] * (x[j] - self.mean[j]);
            }
            out[i] -= scale * acc;
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GaussianMixture {
    /// Covariances are row-major `d x d`.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::domain("mixture needs at least one component"));
        }
        check_dim(weights.len(), means.len())?;
        check_dim(weights.len(), covs.len())?;
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::domain("weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("weights must sum to 1 (got {total})")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::domain("dimension must be positive"));
        }
        let comps = means
            .into_iter()
            .zip(covs)
            .enumerate()
            .map(|(i, (m, c))| {
                check_dim(dim, m.len())?;
                Component::new(m, c, i)
            })
            .collect::<Result<Vec<_>>>()?;
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            dim,
            weights,
            log_weights,
            comps,
        })
    }

    pub fn from_diagonals(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        diags: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let covs = diags
            .iter()
            .map(|dg| {
                let d = dg.len();
                let mut c = vec![0.0; d * d];
                for i in 0..d {
                    c[i * d + i] = dg[i];
                }
                c
            })
            .collect();
        Self::new(weights, means, covs)
    }

    /// `N(mean, var I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::from_diagonals(vec![1.0], vec![mean], vec![vec![var; d]])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::isotropic(vec![0.0; dim], 1.0).expect("valid standard normal")
    }

    /// Default benchmark: 2D, a dominant mode and a rare mode (5% mass).
    pub fn two_mode_benchmark() -> Self {
        Self::from_diagonals(
            vec![0.95, 0.05],
            vec![vec![-1.0, -1.0], vec![2.0, 2.0]],
            vec![vec![0.5, 0.5], vec![0.15, 0.15]],
        )
        .expect("valid benchmark mixture")
    }

    /// Product density of two independent mixtures (components are all pairs).
    pub fn product(a: &Self, b: &Self) -> Result<Self> {
        let (da, db) = (a.dim, b.dim);
        let d = da + db;
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for (wa, ca) in a.weights.iter().zip(&a.comps) {
            for (wb, cb) in b.weights.iter().zip(&b.comps) {
                weights.push(wa * wb);
                let mut m = ca.mean.clone();
                m.extend_from_slice(&cb.mean);
                means.push(m);
                let mut c = vec![0.0; d * d];
                for i in 0..da {
                    for j in 0..da {
                        c[i * d + j] = ca.cov[i * da + j];
                    }
                }
                for i in 0..db {
                    for j in 0..db {
                        c[(da + i) * d + da + j] = cb.cov[i * db + j];
                    }
                }
                covs.push(c);
            }
        }
        // products of weights may drift from 1 by an ulp
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Self::new(weights, means, covs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.comps.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component_mean(&self, m: usize) -> &[f64] {
        &self.comps[m].mean
    }

    /// Row-major covariance of component `m`.
    pub fn component_cov(&self, m: usize) -> &[f64] {
        &self.comps[m].cov
    }

    fn logits(&self, x: &[f64]) -> Logits {
        self.comps
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_pdf(x))
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.log_density_unchecked(x))
    }

    #[inline]
    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        if self.comps.len() == 1 {
            return self.comps[0].log_pdf(x);
        }
        log_sum_exp(&self.logits(x))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let l = self.logits(x);
        let lse = log_sum_exp(&l);
        Ok(l.iter().map(|v| (v - lse).exp()).collect())
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let mut out = vec![0.0; self.dim];
        self.score_into(x, &mut out);
        Ok(out)
    }

    /// Writes `∇ log p(x)` into `out` (overwrites).
    #[inline]
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if self.comps.len() == 1 {
            self.comps[0].add_grad(x, 1.0, out);
            return;
        }
        let l = self.logits(x);
        let lse = log_sum_exp(&l);
        for (c, li) in self.comps.iter().zip(&l) {
            let r = (li - lse).exp();
            if r > 0.0 {
                c.add_grad(x, r, out);
            }
        }
    }

    /// Hessian of `log p` at `x`, row-major `d x d`:
    /// `Σ_m r_m (g_m g_mᵀ - P_m) - s sᵀ` with `g_m = -P_m (x - μ_m)`.
    pub fn score_hessian(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let d = self.dim;
        let l = self.logits(x);
        let lse = log_sum_exp(&l);
        let mut h = vec![0.0; d * d];
        let mut s = vec![0.0; d];
        let mut g = vec![0.0; d];
        for (c, li) in self.comps.iter().zip(&l) {
            let r = (li - lse).exp();
            if r == 0.0 {
                continue;
            }
            g.iter_mut().for_each(|v| *v = 0.0);
            c.add_grad(x, 1.0, &mut g);
            for i in 0..d {
                s[i] += r * g[i];
                for j in 0..d {
                    h[i * d + j] += r * (g[i] * g[j] - c.prec[i * d + j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                h[i * d + j] -= s[i] * s[j];
            }
        }
        Ok(h)
    }

    /// Law of `η ⊙ x + γ ⊙ z` for `x ~ self`, `z ~ N(0, I)`, with per-coordinate
    /// `η` and `γ`.
    pub fn perturbed(&self, eta: &[f64], gamma: &[f64]) -> Result<Self> {
        check_dim(self.dim, eta.len())?;
        check_dim(self.dim, gamma.len())?;
        let d = self.dim;
        let means = self
            .comps
            .iter()
            .map(|c| c.mean.iter().zip(eta).map(|(m, e)| m * e).collect())
            .collect();
        let covs = self
            .comps
            .iter()
            .map(|c| {
                let mut cov = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] = eta[i] * c.cov[i * d + j] * eta[j];
                    }
                    cov[i * d + i] += gamma[i] * gamma[i];
                }
                cov
            })
            .collect();
        Self::new(self.weights.clone(), means, covs)
    }

    /// Closed-form marginal of the forward process at time `t`.
    pub fn noisy_marginal(&self, sched: &NoiseSchedule, t: f64) -> Result<Self> {
        let k = sched.eta_gamma(t)?;
        self.perturbed(&vec![k.eta; self.dim], &vec![k.gamma; self.dim])
    }

    /// Exact diffusion posterior `p(x_T | x_t)` at time `t`.
    pub fn exact_posterior(&self, sched: &NoiseSchedule, t: f64, x_t: &[f64]) -> Result<Self> {
        let k = sched.eta_gamma(t)?;
        self.posterior_given(
            &vec![k.eta; self.dim],
            &vec![k.gamma; self.dim],
            sched.gamma_floor,
            x_t,
        )
    }

    /// Posterior of the clean variable given `x_t = η ⊙ x + γ ⊙ z`.
    pub fn posterior_given(
        &self,
        eta: &[f64],
        gamma: &[f64],
        gamma_floor: f64,
        x_t: &[f64],
    ) -> Result<Self> {
        check_dim(self.dim, x_t.len())?;
        check_dim(self.dim, eta.len())?;
        check_dim(self.dim, gamma.len())?;
        if gamma.iter().any(|g| !(*g >= gamma_floor)) {
            return Err(Error::domain("gamma below floor: posterior degenerates to a point"));
        }
        let d = self.dim;
        let marginal = self.perturbed(eta, gamma)?;
        let l = marginal.logits(x_t);
        let lse = log_sum_exp(&l);
        let weights: Vec<f64> = l.iter().map(|v| (v - lse).exp()).collect();
        // drop numerically dead components; the rest renormalize
        let mut keep_w = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        let lik_prec: Vec<f64> = eta
            .iter()
            .zip(gamma)
            .map(|(e, g)| e * e / (g * g))
            .collect();
        for (c, w) in self.comps.iter().zip(&weights) {
            if *w < 1e-300 {
                continue;
            }
            let mut q = DMatrix::from_row_slice(d, d, &c.prec);
            for i in 0..d {
                q[(i, i)] += lik_prec[i];
            }
            let chol = q
                .cholesky()
                .ok_or_else(|| Error::domain("posterior precision not positive definite"))?;
            let p = DMatrix::from_row_slice(d, d, &c.prec);
            let mut rhs = &p * DVector::from_column_slice(&c.mean);
            for i in 0..d {
                rhs[i] += eta[i] / (gamma[i] * gamma[i]) * x_t[i];
            }
            let mean = chol.solve(&rhs);
            let cov = chol.inverse();
            let mut cov_rows = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    cov_rows[i * d + j] = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                }
            }
            keep_w.push(*w);
            means.push(mean.iter().copied().collect());
            covs.push(cov_rows);
        }
        let total: f64 = keep_w.iter().sum();
        let keep_w = keep_w.into_iter().map(|w| w / total).collect::<Vec<_>>();
        Self::new_unchecked_weights(keep_w, means, covs)
    }

    fn new_unchecked_weights(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        // renormalized weights can sit a few ulps away from summing to 1
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = if (total - 1.0).abs() > 1e-12 {
            weights.iter().map(|w| w / total).collect()
        } else {
            weights
        };
        Self::new(weights, means, covs)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (w, c) in self.weights.iter().zip(&self.comps) {
            for i in 0..self.dim {
                m[i] += w * c.mean[i];
            }
        }
        m
    }

    /// Mixture covariance, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mu = self.mean();
        let mut cov = vec![0.0; d * d];
        for (w, c) in self.weights.iter().zip(&self.comps) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] +=
                        w * (c.cov[i * d + j] + (c.mean[i] - mu[i]) * (c.mean[j] - mu[j]));
                }
            }
        }
        cov
    }

    /// Draws one sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.comps.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let c = &self.comps[idx];
        let d = self.dim;
        let z: SmallVec<[f64; 8]> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        (0..d)
            .map(|i| c.mean[i] + (0..=i).map(|j| c.chol[i * d + j] * z[j]).sum::<f64>())
            .collect()
    }
}

/// Differentiable reward `r(x)` on clean samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardField {
    /// `wᵀx`
    Linear { direction: Vec<f64> },
    /// `-scale ‖x - center‖²`
    NegativeQuadratic { center: Vec<f64>, scale: f64 },
    /// Logistic bump `1 / (1 + exp(-κ (1 - ‖x - c‖² / ρ²)))`.
    SmoothModeIndicator {
        center: Vec<f64>,
        radius: f64,
        sharpness: f64,
    },
}

impl RewardField {
    pub fn dim(&self) -> usize {
        match self {
            RewardField::Linear { direction } => direction.len(),
            RewardField::NegativeQuadratic { center, .. }
            | RewardField::SmoothModeIndicator { center, .. } => center.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RewardField::Linear { direction } => {
                if direction.iter().any(|v| !v.is_finite()) {
                    return Err(Error::domain("reward direction must be finite"));
                }
            }
            RewardField::NegativeQuadratic { scale, .. } => {
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(Error::domain("reward scale must be positive"));
                }
            }
            RewardField::SmoothModeIndicator {
                radius, sharpness, ..
            } => {
                if !(*radius > 0.0 && *sharpness > 0.0) {
                    return Err(Error::domain("radius and sharpness must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn reward(&self, x: &[f64]) -> f64 {
        match self {
            RewardField::Linear { direction } => direction.iter().zip(x).map(|(w, v)| w * v).sum(),
            RewardField::NegativeQuadratic { center, scale } => {
                -scale * sq_dist(x, center)
            }
            RewardField::SmoothModeIndicator {
                center,
                radius,
                sharpness,
            } => {
                let u = sharpness * (1.0 - sq_dist(x, center) / (radius * radius));
                logistic(u)
            }
        }
    }

    pub fn reward_grad(&self, x: &[f64]) -> Vec<f64> {
        match self {
            RewardField::Linear { direction } => direction.clone(),
            RewardField::NegativeQuadratic { center, scale } => x
                .iter()
                .zip(center)
                .map(|(v, c)| -2.0 * scale * (v - c))
                .collect(),
            RewardField::SmoothModeIndicator {
                center,
                radius,
                sharpness,
            } => {
                let r2 = radius * radius;
                let p = logistic(sharpness * (1.0 - sq_dist(x, center) / r2));
                let f = p * (1.0 - p) * sharpness * (-2.0 / r2);
                x.iter().zip(center).map(|(v, c)| f * (v - c)).collect()
            }
        }
    }
}

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
