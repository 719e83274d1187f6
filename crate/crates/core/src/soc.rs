//! Monte-Carlo value function and optimal control of the guided control
//! problem, and the variational upper bound on the value.
//!
//! With a delta state cost at the query time the value collapses to
//! `V(x, t) = α log p_t(x) - log E[exp(β r(x_T)) | x_t = x]`, estimated here
//! from uncontrolled reverse trajectories.

use serde::{Deserialize, Serialize};

use crate::diffusion::{canonical_sum, simulate_uncontrolled, DiffusionModel};
use crate::error::{check_dim, Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::schedules::TimeGrid;
use crate::targets::{GaussianMixture, RewardField};

pub const MIN_TRAJECTORIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SocConfig {
    pub num_trajectories: usize,
    pub alpha: f64,
    pub beta: f64,
    pub fd_step: f64,
    pub proposal_cov_scale: f64,
    /// Use the exact posterior covariance for the proposal when the target
    /// is a single Gaussian.
    pub match_posterior_cov: bool,
    pub k_mc: usize,
    pub seed: u64,
}

impl Default for SocConfig {
    fn default() -> Self {
        Self {
            num_trajectories: 2000,
            alpha: 0.0,
            beta: 1.0,
            fd_step: 0.25,
            proposal_cov_scale: 1.0,
            match_posterior_cov: true,
            k_mc: 2000,
            seed: 0,
        }
    }
}

impl SocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_trajectories < MIN_TRAJECTORIES {
            return Err(Error::domain(format!(
                "num_trajectories must be at least {MIN_TRAJECTORIES}"
            )));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::domain("fd_step must be positive"));
        }
        if !(self.proposal_cov_scale > 0.0 && self.proposal_cov_scale.is_finite()) {
            return Err(Error::domain("proposal_cov_scale must be positive"));
        }
        if self.k_mc < 2 {
            return Err(Error::domain("k_mc must be at least 2"));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::domain("alpha and beta must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub stderr: f64,
    pub dropped: usize,
    /// False when more than 1% of trajectories were dropped.
    pub valid: bool,
}

/// `log mean exp` with max shift and its jackknife standard error.
pub fn log_mean_exp_jackknife(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n == 0 || !max.is_finite() {
        return (f64::NAN, f64::NAN);
    }
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s = canonical_sum(e.clone());
    let full = max + (s / n as f64).ln();
    if n < 2 {
        return (full, f64::NAN);
    }
    let loo: Vec<f64> = e
        .iter()
        .map(|ei| max + ((s - ei).max(f64::MIN_POSITIVE) / (n - 1) as f64).ln())
        .collect();
    let mean_loo = loo.iter().sum::<f64>() / n as f64;
    let ss: f64 = loo.iter().map(|x| (x - mean_loo).powi(2)).sum();
    (full, ((n - 1) as f64 / n as f64 * ss).sqrt())
}

/// `α log p_t(x) - logmeanexp(β r(x_T^m))` over `M` uncontrolled trajectories.
pub fn value_mc(
    x: &[f64],
    t: f64,
    model: &DiffusionModel,
    grid: &TimeGrid,
    reward: &RewardField,
    cfg: &SocConfig,
) -> Result<ValueEstimate> {
    cfg.validate()?;
    check_dim(model.dim(), x.len())?;
    check_dim(model.dim(), reward.dim())?;
    let (_, marginal) = model.marginal(t)?;
    let log_p = if cfg.alpha == 0.0 {
        0.0
    } else {
        cfg.alpha * marginal.log_density(x)?
    };
    let ends = simulate_uncontrolled(x, t, model, grid, cfg.num_trajectories, cfg.seed)?;
    let valid = ends.drop_fraction() <= 0.01;
    if cfg.beta == 0.0 {
        return Ok(ValueEstimate {
            value: log_p,
            stderr: 0.0,
            dropped: ends.dropped,
            valid,
        });
    }
    let tilts: Vec<f64> = ends.samples.iter().map(|s| cfg.beta * reward.reward(s)).collect();
    let (lme, se) = log_mean_exp_jackknife(&tilts);
    Ok(ValueEstimate {
        value: log_p - lme,
        stderr: se,
        dropped: ends.dropped,
        valid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionalDerivative {
    pub value: f64,
    pub stderr: f64,
    pub valid: bool,
}

/// Central difference of `value_mc` along `dir` with common random numbers
/// on both sides.
pub fn directional_derivative_fd(
    x: &[f64],
    dir: &[f64],
    t: f64,
    model: &DiffusionModel,
    grid: &TimeGrid,
    reward: &RewardField,
    cfg: &SocConfig,
) -> Result<DirectionalDerivative> {
    check_dim(x.len(), dir.len())?;
    let h = cfg.fd_step;
    let plus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
    let vp = value_mc(&plus, t, model, grid, reward, cfg)?;
    let vm = value_mc(&minus, t, model, grid, reward, cfg)?;
    // ignores the positive correlation that common random numbers induce,
    // so this overstates the error
    let stderr = (vp.stderr.powi(2) + vm.stderr.powi(2)).sqrt() / (2.0 * h);
    Ok(DirectionalDerivative {
        value: (vp.value - vm.value) / (2.0 * h),
        stderr,
        valid: vp.valid && vm.valid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlEstimate {
    pub control: Vec<f64>,
    pub stderr: Vec<f64>,
    pub valid: bool,
}

/// `u* = -σ(t) ∇V(x, t)` by coordinate-wise central differences.
pub fn optimal_control_fd(
    x: &[f64],
    t: f64,
    model: &DiffusionModel,
    grid: &TimeGrid,
    reward: &RewardField,
    cfg: &SocConfig,
) -> Result<ControlEstimate> {
    let d = model.dim();
    check_dim(d, x.len())?;
    let coeffs = model.layout.coeffs(t)?;
    let mut control = Vec::with_capacity(d);
    let mut stderr = Vec::with_capacity(d);
    let mut valid = true;
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let dd = directional_derivative_fd(x, &e, t, model, grid, reward, cfg)?;
        control.push(-coeffs.sigma[j] * dd.value);
        stderr.push(coeffs.sigma[j] * dd.stderr);
        valid &= dd.valid;
    }
    Ok(ControlEstimate { control, stderr, valid })
}

/// Reward-only control `σ ∇ log E[exp(β r(x_T)) | x_t = x]`: the optimal
/// control with no state cost.
pub fn reward_tilted_control_mc(
    x: &[f64],
    t: f64,
    model: &DiffusionModel,
    grid: &TimeGrid,
    reward: &RewardField,
    cfg: &SocConfig,
) -> Result<ControlEstimate> {
    let cfg = SocConfig { alpha: 0.0, ..*cfg };
    optimal_control_fd(x, t, model, grid, reward, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateEstimate {
    pub value: f64,
    pub stderr: f64,
    pub expected_reward: f64,
    pub kl: f64,
}

/// Gaussian proposal for the clean variable at `(x, t)`.
pub fn proposal(
    x: &[f64],
    t: f64,
    model: &DiffusionModel,
    cfg: &SocConfig,
) -> Result<GaussianMixture> {
    let (coeffs, marginal) = model.marginal(t)?;
    let posterior = model
        .target
        .posterior_given(&coeffs.eta, &coeffs.gamma, coeffs.gamma_floor, x)?;
    let d = model.dim();
    if cfg.match_posterior_cov && model.target.num_components() == 1 {
        return Ok(posterior);
    }
    let score = marginal.score(x)?;
    let mean = crate::diffusion::tweedie_coords(x, &coeffs.eta, &coeffs.gamma, &score)?;
    let mut cov = vec![0.0; d * d];
    for j in 0..d {
        cov[j * d + j] = cfg.proposal_cov_scale * (coeffs.gamma[j] / coeffs.eta[j]).powi(2);
    }
    GaussianMixture::new(vec![1.0], vec![mean], vec![cov])
}

/// `α log p_t(x) - β E_q[r] + KL(q ‖ p(· | x_t))` with `K_mc` proposal draws.
pub fn surrogate_value(
    x: &[f64],
    t: f64,
    model: &DiffusionModel,
    reward: &RewardField,
    cfg: &SocConfig,
) -> Result<SurrogateEstimate> {
    cfg.validate()?;
    check_dim(model.dim(), x.len())?;
    let (coeffs, marginal) = model.marginal(t)?;
    let posterior = model
        .target
        .posterior_given(&coeffs.eta, &coeffs.gamma, coeffs.gamma_floor, x)?;
    let q = proposal(x, t, model, cfg)?;
    let log_p = if cfg.alpha == 0.0 {
        0.0
    } else {
        cfg.alpha * marginal.log_density(x)?
    };
    let k = cfg.k_mc;
    let mut terms = Vec::with_capacity(k);
    let mut rewards = Vec::with_capacity(k);
    let mut log_ratios = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = StreamKey::new(cfg.seed, Purpose::Proposal, 0, i as u64).rng();
        let y = q.sample(&mut rng);
        let r = reward.reward(&y);
        let lr = q.log_density_unchecked(&y) - posterior.log_density_unchecked(&y);
        rewards.push(r);
        log_ratios.push(lr);
        terms.push(-cfg.beta * r + lr);
    }
    let mean = terms.iter().sum::<f64>() / k as f64;
    let var = terms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let value = log_p + mean;
    if !value.is_finite() {
        return Err(Error::NonFinite { step: 0, particle: 0 });
    }
    Ok(SurrogateEstimate {
        value,
        stderr: (var / k as f64).sqrt(),
        expected_reward: rewards.iter().sum::<f64>() / k as f64,
        kl: log_ratios.iter().sum::<f64>() / k as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub value: f64,
    pub value_stderr: f64,
    pub surrogate: f64,
    pub surrogate_stderr: f64,
    pub bound_satisfied: bool,
    pub valid: bool,
}

/// Checks `V ≤ Ṽ + 3 · combined stderr` at one state.
pub fn check_bound(
    x: &[f64],
    t: f64,
    model: &DiffusionModel,
    grid: &TimeGrid,
    reward: &RewardField,
    cfg: &SocConfig,
) -> Result<BoundCheck> {
    let v = value_mc(x, t, model, grid, reward, cfg)?;
    let s = surrogate_value(x, t, model, reward, cfg)?;
    let combined = (v.stderr.powi(2) + s.stderr.powi(2)).sqrt();
    Ok(BoundCheck {
        value: v.value,
        value_stderr: v.stderr,
        surrogate: s.value,
        surrogate_stderr: s.stderr,
        bound_satisfied: v.value <= s.value + 3.0 * combined,
        valid: v.valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{GuidanceSchedules, NoiseSchedule};

    fn normal_model() -> DiffusionModel {
        DiffusionModel::new(
            GaussianMixture::standard_normal(1),
            NoiseSchedule::vp(0.1, 20.0),
            GuidanceSchedules::default(),
        )
    }

    /// Time where the VP kernel has the given η, by bisection.
    fn time_with_eta(model: &DiffusionModel, eta: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if model.layout.coeffs(mid).unwrap().eta[0] < eta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 1000).unwrap()
    }

    #[test]
    fn jackknife_examples() {
        let (v, se) = log_mean_exp_jackknife(&[0.0; 10]);
        assert_eq!(v, 0.0);
        assert_eq!(se, 0.0);
        let (v, _) = log_mean_exp_jackknife(&[1000.0, 1000.0]);
        assert_eq!(v, 1000.0);
        let x = [0.1, -0.4, 1.3, 0.7];
        let direct = (x.iter().map(|v: &f64| v.exp()).sum::<f64>() / 4.0).ln();
        assert!((log_mean_exp_jackknife(&x).0 - direct).abs() < 1e-15);
    }

    #[test]
    fn null_costs() {
        let model = normal_model();
        let r = RewardField::Linear { direction: vec![1.0] };
        let cfg = SocConfig {
            num_trajectories: 200,
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let v = value_mc(&[0.3], 0.5, &model, &grid(), &r, &cfg).unwrap();
        assert_eq!(v.value, 0.0);
        let cfg = SocConfig { alpha: 1.0, ..cfg };
        let v = value_mc(&[0.3], 0.5, &model, &grid(), &r, &cfg).unwrap();
        let (_, m) = model.marginal(0.5).unwrap();
        assert_eq!(v.value, m.log_density(&[0.3]).unwrap());
        let u = optimal_control_fd(&[0.3], 0.5, &model, &grid(), &r, &SocConfig { alpha: 0.0, ..cfg }).unwrap();
        assert_eq!(u.control, vec![0.0]);
    }

    #[test]
    fn gaussian_linear_reward_value() {
        let model = normal_model();
        let t = time_with_eta(&model, 0.8);
        let r = RewardField::Linear { direction: vec![1.0] };
        let cfg = SocConfig {
            num_trajectories: 4000,
            seed: 3,
            ..Default::default()
        };
        let v = value_mc(&[1.0], t, &model, &grid(), &r, &cfg).unwrap();
        assert!(v.valid);
        assert!((v.value + 0.98).abs() < 3.0 * v.stderr, "{} ± {}", v.value, v.stderr);
    }

    #[test]
    fn fd_antisymmetric() {
        let model = normal_model();
        let r = RewardField::Linear { direction: vec![1.0] };
        let cfg = SocConfig {
            num_trajectories: 200,
            alpha: 0.5,
            ..Default::default()
        };
        let a = directional_derivative_fd(&[0.2], &[1.0], 0.4, &model, &grid(), &r, &cfg).unwrap();
        let b = directional_derivative_fd(&[0.2], &[-1.0], 0.4, &model, &grid(), &r, &cfg).unwrap();
        assert_eq!(a.value.to_bits(), (-b.value).to_bits());
    }

    #[test]
    fn alias_matches_alpha_zero() {
        let model = normal_model();
        let r = RewardField::Linear { direction: vec![1.0] };
        let cfg = SocConfig {
            num_trajectories: 200,
            alpha: 0.7,
            ..Default::default()
        };
        let a = reward_tilted_control_mc(&[0.2], 0.4, &model, &grid(), &r, &cfg).unwrap();
        let b = optimal_control_fd(&[0.2], 0.4, &model, &grid(), &r, &SocConfig { alpha: 0.0, ..cfg }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matched_proposal_has_zero_kl() {
        let model = normal_model();
        let r = RewardField::Linear { direction: vec![1.0] };
        let cfg = SocConfig::default();
        let s = surrogate_value(&[1.0], 0.5, &model, &r, &cfg).unwrap();
        assert!(s.kl.abs() < 1e-12);
    }

    #[test]
    fn narrow_proposal_kl_grows() {
        let model = normal_model();
        let r = RewardField::Linear { direction: vec![1.0] };
        let t = 0.5;
        let c = model.layout.coeffs(t).unwrap();
        // the posterior variance is γ², i.e. scale η² relative to γ²/η²
        let matched = c.eta[0].powi(2);
        let mut last = f64::NEG_INFINITY;
        for f in [1.0, 0.3, 0.1, 0.01, 1e-4] {
            let cfg = SocConfig {
                match_posterior_cov: false,
                proposal_cov_scale: matched * f,
                ..Default::default()
            };
            let s = surrogate_value(&[1.0], t, &model, &r, &cfg).unwrap();
            assert!(s.kl > last);
            last = s.kl;
        }
        assert!(last > 3.0);
    }
}
