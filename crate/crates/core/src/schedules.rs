//! Time discretization, VP/VE noise schedules and the guidance schedules
//! (low-density annealing α, Polyak reward strength β, Stein stepsize ε).
//!
//! Time runs from the prior (`t = 0`) to the data (`t = T`). Schedules are
//! parameterized by the dimensionless noise time `s = 1 - t/T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_k = k T / K`, `k = 0..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub num_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, num_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
        }
        if num_steps == 0 {
            return Err(Error::domain("num_steps must be at least 1"));
        }
        Ok(Self { horizon, num_steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.num_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.num_steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.num_steps as f64
        }
    }

    pub fn noise_time(&self, t: f64) -> f64 {
        1.0 - t / self.horizon
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.num_steps).map(|k| self.time(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Variance preserving, linear rate `β(s) = β_min + s (β_max - β_min)`.
    Vp { beta_min: f64, beta_max: f64 },
    /// Variance exploding, geometric `γ(s) = σ_min (σ_max/σ_min)^s`.
    Ve { sigma_min: f64, sigma_max: f64 },
}

/// Forward perturbation kernel parameters: `x_t ~ N(η x_T, γ² I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub eta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub gamma_floor: f64,
    pub horizon: f64,
}

pub const DEFAULT_GAMMA_FLOOR: f64 = 1e-4;

impl NoiseSchedule {
    pub fn vp(beta_min: f64, beta_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Vp { beta_min, beta_max },
            gamma_floor: DEFAULT_GAMMA_FLOOR,
            horizon: 1.0,
        }
    }

    pub fn ve(sigma_min: f64, sigma_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            },
            gamma_floor: DEFAULT_GAMMA_FLOOR,
            horizon: 1.0,
        }
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_gamma_floor(mut self, floor: f64) -> Self {
        self.gamma_floor = floor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_floor > 0.0 && self.gamma_floor < 1.0) {
            return Err(Error::domain("gamma_floor must lie in (0, 1)"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::domain("horizon must be positive"));
        }
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => {
                if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
                    return Err(Error::domain("VP requires 0 < beta_min <= beta_max"));
                }
            }
            ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            } => {
                if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
                    return Err(Error::domain("VE requires 0 < sigma_min < sigma_max"));
                }
            }
        }
        Ok(())
    }

    pub fn is_vp(&self) -> bool {
        matches!(self.kind, ScheduleKind::Vp { .. })
    }

    pub fn noise_time(&self, t: f64) -> Result<f64> {
        // small slack so grid endpoints computed in floating point are accepted
        let slack = 1e-12 * self.horizon;
        if !(t >= -slack && t <= self.horizon + slack) {
            return Err(Error::domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok((1.0 - t / self.horizon).clamp(0.0, 1.0))
    }

    /// `(η(t), γ(t))` with `γ` floored at `gamma_floor`.
    ///
    /// For VP, flooring `γ` rescales `η = sqrt(1 - γ²)` so that
    /// `η² + γ² = 1` holds at every time including the data end.
    pub fn eta_gamma(&self, t: f64) -> Result<Kernel> {
        let s = self.noise_time(t)?;
        Ok(self.kernel_at_noise(s))
    }

    pub fn kernel_at_noise(&self, s: f64) -> Kernel {
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => {
                let log_eta = -0.25 * s * s * (beta_max - beta_min) - 0.5 * s * beta_min;
                let eta = log_eta.exp();
                // 1 - η² computed as -expm1(2 log η) keeps precision near the data end
                let gamma = (-(2.0 * log_eta).exp_m1()).max(0.0).sqrt();
                if gamma < self.gamma_floor {
                    let gamma = self.gamma_floor;
                    Kernel {
                        eta: (1.0 - gamma * gamma).sqrt(),
                        gamma,
                    }
                } else {
                    Kernel { eta, gamma }
                }
            }
            ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            } => Kernel {
                eta: 1.0,
                gamma: (sigma_min * (sigma_max / sigma_min).powf(s)).max(self.gamma_floor),
            },
        }
    }

    /// VP instantaneous rate `β(s)` per unit noise time.
    pub fn vp_rate(&self, s: f64) -> Option<f64> {
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => Some(beta_min + s * (beta_max - beta_min)),
            ScheduleKind::Ve { .. } => None,
        }
    }

    /// Linear drift coefficient `c(t)` and diffusion `σ(t)` of the forward SDE,
    /// expressed per unit of `t`: `b(x, t) = c(t) x`.
    pub fn drift_coeff_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        let s = self.noise_time(t)?;
        let per_t = 1.0 / self.horizon;
        Ok(match self.kind {
            ScheduleKind::Vp { .. } => {
                let rate = self.vp_rate(s).unwrap_or(0.0);
                (-0.5 * rate * per_t, (rate * per_t).sqrt())
            }
            ScheduleKind::Ve {
                sigma_min,
                sigma_max,
            } => {
                let g = sigma_min * (sigma_max / sigma_min).powf(s);
                (0.0, g * (2.0 * (sigma_max / sigma_min).ln() * per_t).sqrt())
            }
        })
    }

    /// `(b(x, t), σ(t))` for the forward SDE.
    pub fn drift_diffusion(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        let (c, sigma) = self.drift_coeff_diffusion(t)?;
        Ok((x.iter().map(|v| c * v).collect(), sigma))
    }

    /// Standard deviation of the isotropic Gaussian prior at `t = 0`.
    pub fn prior_std(&self) -> f64 {
        self.kernel_at_noise(1.0).gamma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaKind {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedules {
    pub alpha_kind: AlphaKind,
    pub alpha_max: f64,
    pub beta_max: f64,
    pub snr: f64,
    /// Upper clamp for β; `None` means `10 * beta_max`.
    pub beta_cap: Option<f64>,
}

impl Default for GuidanceSchedules {
    fn default() -> Self {
        Self {
            alpha_kind: AlphaKind::Constant,
            alpha_max: 0.0,
            beta_max: 0.0,
            snr: 0.1,
            beta_cap: None,
        }
    }
}

impl GuidanceSchedules {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha_max) {
            return Err(Error::domain("alpha_max must lie in [0, 1)"));
        }
        if !(self.beta_max >= 0.0 && self.beta_max.is_finite()) {
            return Err(Error::domain("beta_max must be finite and >= 0"));
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return Err(Error::domain("snr must be finite and >= 0"));
        }
        if let Some(cap) = self.beta_cap {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(Error::domain("beta_cap must be positive"));
            }
        }
        Ok(())
    }

    pub fn beta_cap(&self) -> f64 {
        self.beta_cap.unwrap_or(10.0 * self.beta_max)
    }

    pub fn alpha_at(&self, t: f64, horizon: f64) -> f64 {
        match self.alpha_kind {
            AlphaKind::Constant => self.alpha_max,
            AlphaKind::Linear => (t / horizon).clamp(0.0, 1.0) * self.alpha_max,
        }
    }

    /// Polyak reward strength `β_max ‖s‖ / ‖∇r‖`, clamped to `[0, beta_cap]`.
    pub fn beta_at(&self, score_norm: f64, reward_grad_norm: f64) -> f64 {
        let cap = self.beta_cap();
        if reward_grad_norm <= 0.0 {
            return cap;
        }
        let beta = self.beta_max * score_norm / reward_grad_norm;
        if beta.is_nan() {
            cap
        } else {
            beta.clamp(0.0, cap)
        }
    }

    /// Adaptive Stein stepsize `2 η² (snr ‖z‖ / ‖g‖)²`; zero when `‖g‖ < 1e-12`.
    pub fn epsilon_at(&self, eta: f64, z_norm: f64, g_norm: f64) -> f64 {
        if g_norm < 1e-12 {
            return 0.0;
        }
        let ratio = self.snr * z_norm / g_norm;
        2.0 * eta * eta * ratio * ratio
    }
}

/// One row of the `schedules dump` table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleRow {
    pub k: usize,
    pub t: f64,
    pub s: f64,
    pub eta: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub alpha: f64,
}

pub fn schedule_table(
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    guidance: &GuidanceSchedules,
) -> Result<Vec<ScheduleRow>> {
    (0..=grid.num_steps)
        .map(|k| {
            let t = grid.time(k);
            let kern = sched.eta_gamma(t)?;
            let (_, sigma) = sched.drift_coeff_diffusion(t)?;
            Ok(ScheduleRow {
                k,
                t,
                s: grid.noise_time(t),
                eta: kern.eta,
                gamma: kern.gamma,
                sigma,
                alpha: guidance.alpha_at(t, grid.horizon),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vp() -> NoiseSchedule {
        NoiseSchedule::vp(0.1, 20.0)
    }

    #[test]
    fn grid_endpoints() {
        let g = TimeGrid::new(2.0, 7).unwrap();
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(7), 2.0);
        assert_eq!(g.noise_time(0.0), 1.0);
        assert_eq!(g.noise_time(2.0), 0.0);
        let ts: Vec<f64> = g.times().collect();
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn vp_data_end_is_floored() {
        let k = vp().eta_gamma(1.0).unwrap();
        assert_eq!(k.gamma, DEFAULT_GAMMA_FLOOR);
        assert!((k.eta - 1.0).abs() < 1e-8);
    }

    #[test]
    fn vp_prior_end_closed_form() {
        let k = vp().eta_gamma(0.0).unwrap();
        let eta = (-5.025f64).exp();
        assert!((k.eta - eta).abs() < 1e-15);
        assert!((k.eta - 6.56e-3).abs() < 2e-5);
        assert!((k.gamma - (1.0 - eta * eta).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ve_midpoint_matches_power() {
        let k = NoiseSchedule::ve(0.01, 50.0).eta_gamma(0.5).unwrap();
        assert_eq!(k.eta, 1.0);
        let direct = 0.01 * 5000f64.powf(0.5);
        assert!((k.gamma - direct).abs() < 1e-14);
        assert!((k.gamma - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_time_is_domain_error() {
        assert!(matches!(vp().eta_gamma(1.5), Err(Error::Domain(_))));
        assert!(matches!(vp().eta_gamma(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn drift_examples() {
        let (b, _) = NoiseSchedule::ve(0.01, 50.0)
            .drift_diffusion(&[1.0, -2.0], 0.3)
            .unwrap();
        assert_eq!(b, vec![0.0, 0.0]);
        let (b, _) = vp().drift_diffusion(&[0.0, 0.0], 0.3).unwrap();
        assert_eq!(b, vec![0.0, 0.0]);
        // β(s) = 0.1 at the data end (s = 0)
        let (b, sigma) = vp().drift_diffusion(&[2.0, 0.0], 1.0).unwrap();
        assert!((b[0] + 0.1).abs() < 1e-15 && b[1] == 0.0);
        assert!((sigma - 0.1f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn vp_identity_and_monotone_gamma_on_grid() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let s = vp();
        let mut prev = f64::INFINITY;
        for t in g.times() {
            let k = s.eta_gamma(t).unwrap();
            assert!((k.eta * k.eta + k.gamma * k.gamma - 1.0).abs() < 1e-12);
            assert!(k.gamma <= prev);
            prev = k.gamma;
        }
    }

    #[test]
    fn alpha_examples() {
        let c = GuidanceSchedules {
            alpha_kind: AlphaKind::Constant,
            alpha_max: 0.42,
            ..Default::default()
        };
        assert_eq!(c.alpha_at(0.0, 1.0), 0.42);
        assert_eq!(c.alpha_at(0.77, 1.0), 0.42);
        let l = GuidanceSchedules {
            alpha_kind: AlphaKind::Linear,
            alpha_max: 0.4,
            ..Default::default()
        };
        assert_eq!(l.alpha_at(1.0, 2.0), 0.2);
        assert_eq!(l.alpha_at(0.0, 2.0), 0.0);
    }

    #[test]
    fn beta_examples() {
        let g = GuidanceSchedules {
            beta_max: 1.0,
            ..Default::default()
        };
        assert_eq!(g.beta_at(2.0, 4.0), 0.5);
        assert_eq!(g.beta_at(2.0, 0.0), g.beta_cap());
        assert_eq!(g.beta_cap(), 10.0);
        let off = GuidanceSchedules::default();
        assert_eq!(off.beta_at(3.0, 0.5), 0.0);
    }

    #[test]
    fn epsilon_examples() {
        let g = GuidanceSchedules {
            snr: 0.1,
            ..Default::default()
        };
        assert!((g.epsilon_at(1.0, 3.0, 3.0) - 0.02).abs() < 1e-17);
        let g = GuidanceSchedules {
            snr: 0.2,
            ..Default::default()
        };
        assert!((g.epsilon_at(0.5, 3.0, 6.0) - 0.005).abs() < 1e-17);
        assert_eq!(g.epsilon_at(0.5, 3.0, 0.0), 0.0);
    }

    #[test]
    fn schedule_table_has_k_plus_one_rows() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let rows = schedule_table(&g, &vp(), &GuidanceSchedules::default()).unwrap();
        assert_eq!(rows.len(), 11);
        assert_eq!(rows[10].s, 0.0);
    }

    proptest! {
        #[test]
        fn eta_gamma_is_pure(t in 0.0f64..=1.0) {
            let s = vp();
            let a = s.eta_gamma(t).unwrap();
            let b = s.eta_gamma(t).unwrap();
            prop_assert_eq!(a.eta.to_bits(), b.eta.to_bits());
            prop_assert_eq!(a.gamma.to_bits(), b.gamma.to_bits());
        }

        #[test]
        fn linear_alpha_monotone(t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0, amax in 0.0f64..0.99) {
            let g = GuidanceSchedules { alpha_kind: AlphaKind::Linear, alpha_max: amax, ..Default::default() };
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(g.alpha_at(lo, 1.0) <= g.alpha_at(hi, 1.0));
            prop_assert!(g.alpha_at(hi, 1.0) <= amax);
        }

        #[test]
        fn epsilon_quadratic_in_snr(snr in 1e-3f64..10.0, eta in 0.01f64..1.0, z in 0.1f64..10.0, gn in 0.1f64..10.0) {
            let a = GuidanceSchedules { snr, ..Default::default() };
            let b = GuidanceSchedules { snr: 2.0 * snr, ..Default::default() };
            prop_assert_eq!(b.epsilon_at(eta, z, gn) / a.epsilon_at(eta, z, gn), 4.0);
        }

        #[test]
        fn beta_nonnegative(sn in 0.0f64..100.0, rn in 0.0f64..100.0, bmax in 0.0f64..5.0) {
            let g = GuidanceSchedules { beta_max: bmax, ..Default::default() };
            let b = g.beta_at(sn, rn);
            prop_assert!(b >= 0.0 && b <= g.beta_cap());
        }
    }
}
