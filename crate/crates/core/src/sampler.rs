//! End-to-end guided sampling and its ablations.
//!
//! Each step at time `t_k`: (sdg) Stein-correct the Tweedie estimates and
//! renoise, recompute the clean estimates, then take a guided reverse step
//! with weights `α(t)` on the score and `β(t)` on the reward pullback.
//! `baseline_no_stein` skips the correction; `unguided` takes plain steps.
//! The returned samples are the clean estimates at the data end.

use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    batch_scores, batch_tweedie, canonical_sum, conditional_scores, mean_row_norm, reverse_step_with,
    reward_pullback, DiffusionModel, Guidance, LevelCoeffs, ParticleBatch, Pullback, ScoreSource,
};
use crate::error::{Error, Result};
use crate::metrics::{hit_fraction, in_support_fraction, ksd_ustat, mean_std};
use crate::schedules::TimeGrid;
use crate::stein::{correct_blocks, renoise_in_place, Renoise, SteinConfig, SteinDiagnostics};
use crate::targets::{GaussianMixture, RewardField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unguided,
    BaselineNoStein,
    Sdg,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Unguided => "unguided",
            Mode::BaselineNoStein => "baseline_no_stein",
            Mode::Sdg => "sdg",
        }
    }
}

/// A sample is a hit when `reward ≥ reward_threshold` and
/// `log p ≥ log_density_threshold`; it is in support when only the latter holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitCriteria {
    pub reward_threshold: f64,
    pub log_density_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub mode: Mode,
    pub num_particles: usize,
    pub seed: u64,
    /// No reward forcing and no Stein correction while any block's `η`
    /// is below this level.
    pub warmup_eta: f64,
    pub pullback: Pullback,
    /// Guide with the Stein-corrected estimates instead of recomputing
    /// Tweedie after renoising.
    pub reuse_corrected: bool,
    pub track_ksd: bool,
    /// Record a metric row every `metric_cadence` steps.
    pub metric_cadence: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            mode: Mode::Sdg,
            num_particles: 500,
            seed: 0,
            warmup_eta: 0.05,
            pullback: Pullback::Exact,
            reuse_corrected: false,
            track_ksd: false,
            metric_cadence: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: DiffusionModel,
    pub grid: TimeGrid,
    pub reward: RewardField,
    pub stein: SteinConfig,
    pub settings: SamplerSettings,
    pub hit: HitCriteria,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.stein.validate()?;
        self.reward.validate()?;
        if self.reward.dim() != self.model.dim() {
            return Err(Error::Dimension {
                expected: self.model.dim(),
                got: self.reward.dim(),
            });
        }
        if (self.grid.horizon - self.model.horizon()).abs() > 1e-12 {
            return Err(Error::domain("grid horizon differs from the schedule horizon"));
        }
        if self.settings.num_particles == 0 {
            return Err(Error::domain("num_particles must be positive"));
        }
        if self.settings.metric_cadence == 0 {
            return Err(Error::domain("metric_cadence must be positive"));
        }
        if !(self.settings.warmup_eta >= 0.0 && self.settings.warmup_eta < 1.0) {
            return Err(Error::domain("warmup_eta must lie in [0, 1)"));
        }
        for b in self.model.layout.blocks() {
            b.sched.validate()?;
            b.guidance.validate()?;
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut e = self.clone();
        e.settings.mode = mode;
        e
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut e = self.clone();
        e.settings.seed = seed;
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockRow {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub bandwidth: Option<f64>,
    pub phi_norm: f64,
    pub ksd_before: Option<f64>,
    pub ksd_after: Option<f64>,
}

/// Metrics at grid index `step`, taken on the clean estimates that drive the
/// guided step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub t: f64,
    pub blocks: Vec<BlockRow>,
    pub mean_reward: f64,
    pub mean_score_norm: f64,
    pub ksd: Option<f64>,
    pub in_support: f64,
    pub hit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { step: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub rows: Vec<StepRow>,
    /// Clean estimates at the data end (`N × d`); empty when aborted.
    pub samples: Array2<f64>,
    /// Noisy states after every step, when requested.
    pub trajectory: Option<Vec<Array2<f64>>>,
    pub status: RunStatus,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Terminal statistics of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub hit_fraction: f64,
    pub in_support_fraction: f64,
    pub mean_reward: f64,
}

pub fn summarize(exp: &Experiment, samples: &Array2<f64>) -> Result<RunSummary> {
    let h = &exp.hit;
    let rewards: Vec<f64> = samples
        .axis_iter(Axis(0))
        .map(|r| exp.reward.reward(&r.to_vec()))
        .collect();
    Ok(RunSummary {
        hit_fraction: hit_fraction(
            samples.view(),
            &exp.reward,
            h.reward_threshold,
            &exp.model.target,
            h.log_density_threshold,
        )?,
        in_support_fraction: in_support_fraction(samples.view(), &exp.model.target, h.log_density_threshold)?,
        mean_reward: canonical_sum(rewards) / samples.nrows().max(1) as f64,
    })
}

fn step_metrics(
    exp: &Experiment,
    batch: &ParticleBatch,
    k: usize,
    t: f64,
    blocks: Vec<BlockRow>,
    ksd: Option<f64>,
) -> Result<StepRow> {
    let clean = &batch.clean;
    let d = clean.ncols();
    let n = clean.nrows();
    let rewards: Vec<f64> = clean
        .axis_iter(Axis(0))
        .map(|r| exp.reward.reward(&r.to_vec()))
        .collect();
    let scores = batch_scores(clean.view(), &exp.model.target);
    let h = &exp.hit;
    Ok(StepRow {
        step: k,
        t,
        blocks,
        mean_reward: canonical_sum(rewards) / n as f64,
        mean_score_norm: mean_row_norm(scores.view(), 0..d),
        ksd,
        in_support: in_support_fraction(clean.view(), &exp.model.target, h.log_density_threshold)?,
        hit: hit_fraction(
            clean.view(),
            &exp.reward,
            h.reward_threshold,
            &exp.model.target,
            h.log_density_threshold,
        )?,
    })
}

/// Runs the sampler. Configuration errors are returned as `Err`; a numerical
/// blowup ends the run early with an `Aborted` status and the rows so far.
pub fn run(exp: &Experiment) -> Result<RunRecord> {
    run_with(exp, false)
}

pub fn run_with(exp: &Experiment, keep_trajectory: bool) -> Result<RunRecord> {
    exp.validate()?;
    let start = Instant::now();
    let st = &exp.settings;
    let mut rows = Vec::new();
    let mut trajectory = keep_trajectory.then(Vec::new);
    let mut batch = ParticleBatch::from_prior(&exp.model, st.num_particles, st.seed)?;
    if let Some(tr) = trajectory.as_mut() {
        tr.push(batch.noisy.clone());
    }
    let mut status = RunStatus::Completed;
    for k in 0..exp.grid.num_steps {
        match guided_step(exp, &batch, k) {
            Ok((next, row)) => {
                if k % st.metric_cadence == 0 {
                    rows.push(row);
                }
                batch = next;
                if let Some(tr) = trajectory.as_mut() {
                    tr.push(batch.noisy.clone());
                }
            }
            Err(e @ Error::NonFinite { .. }) => {
                status = RunStatus::Aborted {
                    step: k,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let samples = if status == RunStatus::Completed {
        let t_end = exp.grid.time(exp.grid.num_steps);
        let (coeffs, marginal) = exp.model.marginal(t_end)?;
        let scores = batch_scores(batch.noisy.view(), &marginal);
        let out = batch_tweedie(batch.noisy.view(), scores.view(), &coeffs)?;
        if out.iter().any(|v| !v.is_finite()) {
            status = RunStatus::Aborted {
                step: exp.grid.num_steps,
                reason: "non-finite terminal estimate".into(),
            };
            Array2::zeros((0, exp.model.dim()))
        } else {
            out
        }
    } else {
        Array2::zeros((0, exp.model.dim()))
    };
    Ok(RunRecord {
        mode: st.mode,
        seed: st.seed,
        rows,
        samples,
        trajectory,
        status,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// One full iteration at grid index `k`: optional Stein correction and
/// renoising, clean estimation, and the (guided) reverse step.
pub fn guided_step(exp: &Experiment, batch: &ParticleBatch, k: usize) -> Result<(ParticleBatch, StepRow)> {
    let st = &exp.settings;
    let model = &exp.model;
    let t = exp.grid.time(k);
    let (coeffs, marginal) = model.marginal(t)?;
    let blocks = model.layout.blocks();
    let n = batch.len();
    // each block leaves warmup once its own noise level is high enough
    let warm: Vec<bool> = blocks
        .iter()
        .map(|b| coeffs.eta[b.cols.clone()].iter().any(|e| *e < st.warmup_eta))
        .collect();
    let active: Vec<bool> = warm.iter().map(|w| !w).collect();

    let mut work = batch.clone();
    work.step = k;
    let mut scores = batch_scores(work.noisy.view(), &marginal);
    work.clean = batch_tweedie(work.noisy.view(), scores.view(), &coeffs)?;

    let mut diags: Vec<Option<SteinDiagnostics>> = vec![None; blocks.len()];
    if st.mode == Mode::Sdg && active.iter().any(|a| *a) {
        let stein_cfg = SteinConfig {
            track_ksd: st.track_ksd || exp.stein.track_ksd,
            ..exp.stein
        };
        let tweedie = work.clean.clone();
        let d_out = correct_blocks(&mut work, model, &coeffs, &marginal, &stein_cfg, &active)?;
        diags = d_out
            .into_iter()
            .zip(&active)
            .map(|(d, a)| a.then_some(d))
            .collect();
        if exp.stein.renoise != Renoise::Off {
            renoise_in_place(&mut work, model, &coeffs, &tweedie, exp.stein.renoise, &active);
            work.check_finite()?;
            scores = batch_scores(work.noisy.view(), &marginal);
            if !st.reuse_corrected {
                work.clean = batch_tweedie(work.noisy.view(), scores.view(), &coeffs)?;
            }
        }
    }

    let guidance = if st.mode == Mode::Unguided {
        None
    } else {
        Some(guidance_for(
            model,
            t,
            &coeffs,
            &marginal,
            &work,
            scores.view(),
            &exp.reward,
            st.pullback,
            &warm,
        )?)
    };
    let ksd = if st.track_ksd && n >= 2 {
        let exact = conditional_scores(
            work.clean.view(),
            work.noisy.view(),
            &coeffs,
            &model.target,
            &marginal,
            ScoreSource::ExactConditional,
        );
        let h = exp.stein.bandwidth.resolve(work.clean.view());
        Some(ksd_ustat(work.clean.view(), exact.view(), h)?)
    } else {
        None
    };
    let block_rows = blocks
        .iter()
        .zip(&diags)
        .map(|(b, dg)| {
            let j = b.cols.start;
            BlockRow {
                alpha: guidance.as_ref().map_or(0.0, |g| g.alpha[j]),
                beta: guidance.as_ref().map_or(0.0, |g| g.beta[j]),
                epsilon: dg.map_or(0.0, |x| x.epsilon),
                bandwidth: dg.map(|x| x.bandwidth),
                phi_norm: dg.map_or(0.0, |x| x.phi_norm),
                ksd_before: dg.and_then(|x| x.ksd_before),
                ksd_after: dg.and_then(|x| x.ksd_after),
            }
        })
        .collect();
    let row = step_metrics(exp, &work, k, t, block_rows, ksd)?;

    let next = reverse_step_with(&work, model, &exp.grid, &coeffs, scores.view(), guidance.as_ref())?;
    Ok((next, row))
}

/// Per-coordinate `α(t)`, `β(t)` and reward pullbacks at the clean
/// estimates in `batch`. `β` uses block-local batch-mean norms of the noisy
/// scores and of the pullbacks; it is zero on blocks flagged in `warm`.
#[allow(clippy::too_many_arguments)]
pub fn guidance_for(
    model: &DiffusionModel,
    t: f64,
    coeffs: &LevelCoeffs,
    marginal: &GaussianMixture,
    batch: &ParticleBatch,
    scores: ArrayView2<f64>,
    reward: &RewardField,
    pullback: Pullback,
    warm: &[bool],
) -> Result<Guidance> {
    let (n, d) = batch.noisy.dim();
    let mut alpha = vec![0.0; d];
    let mut beta = vec![0.0; d];
    let mut pull = Array2::zeros((n, d));
    for (i, mut row) in pull.axis_iter_mut(Axis(0)).enumerate() {
        let g = reward_pullback(
            &batch.noisy.row(i).to_vec(),
            &batch.clean.row(i).to_vec(),
            coeffs,
            marginal,
            reward,
            pullback,
        )?;
        row.assign(&ndarray::ArrayView1::from(&g[..]));
    }
    let horizon = model.horizon();
    for (b, w) in model.layout.blocks().iter().zip(warm) {
        let a = b.guidance.alpha_at(t, horizon);
        let bt = if *w {
            0.0
        } else {
            b.guidance.beta_at(
                mean_row_norm(scores, b.cols.clone()),
                mean_row_norm(pull.view(), b.cols.clone()),
            )
        };
        for j in b.cols.clone() {
            alpha[j] = a;
            beta[j] = bt;
        }
    }
    Ok(Guidance {
        alpha,
        beta,
        reward_pullback: pull,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedPair {
    pub seed: u64,
    pub a: Option<RunSummary>,
    pub b: Option<RunSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricComparison {
    pub name: String,
    pub a: MeanStd,
    pub b: MeanStd,
    pub diff: MeanStd,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub mode_a: Mode,
    pub mode_b: Mode,
    pub per_seed: Vec<SeedPair>,
    pub metrics: Vec<MetricComparison>,
    pub failed_seeds: Vec<u64>,
}

/// Runs both experiments on every seed and summarizes paired metrics.
pub fn compare(a: &Experiment, b: &Experiment, seeds: &[u64]) -> Result<Comparison> {
    if a.model.target != b.model.target || a.reward != b.reward {
        return Err(Error::domain("compared configs must share target and reward"));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut failed = Vec::new();
    for &seed in seeds {
        let one = |e: &Experiment| -> Result<RunSummary> {
            let rec = run(&e.with_seed(seed))?;
            match &rec.status {
                RunStatus::Completed => summarize(e, &rec.samples),
                RunStatus::Aborted { step, reason } => Err(Error::domain(format!(
                    "run aborted at step {step}: {reason}"
                ))),
            }
        };
        let (ra, rb) = (one(a), one(b));
        let error = match (&ra, &rb) {
            (Err(e), _) | (_, Err(e)) => Some(e.to_string()),
            _ => None,
        };
        if error.is_some() {
            failed.push(seed);
        }
        per_seed.push(SeedPair {
            seed,
            a: ra.ok(),
            b: rb.ok(),
            error,
        });
    }
    let ok: Vec<(&RunSummary, &RunSummary)> = per_seed
        .iter()
        .filter_map(|p| Some((p.a.as_ref()?, p.b.as_ref()?)))
        .collect();
    let metric = |name: &str, f: fn(&RunSummary) -> f64| {
        let va: Vec<f64> = ok.iter().map(|(x, _)| f(x)).collect();
        let vb: Vec<f64> = ok.iter().map(|(_, y)| f(y)).collect();
        let vd: Vec<f64> = ok.iter().map(|(x, y)| f(x) - f(y)).collect();
        let ms = |v: &[f64]| {
            let (mean, std) = mean_std(v);
            MeanStd { mean, std }
        };
        MetricComparison {
            name: name.to_string(),
            a: ms(&va),
            b: ms(&vb),
            diff: ms(&vd),
        }
    };
    Ok(Comparison {
        mode_a: a.settings.mode,
        mode_b: b.settings.mode,
        metrics: vec![
            metric("hit_fraction", |s| s.hit_fraction),
            metric("in_support_fraction", |s| s.in_support_fraction),
            metric("mean_reward", |s| s.mean_reward),
        ],
        per_seed,
        failed_seeds: failed,
    })
}

/// Column block of a terminal sample matrix.
pub fn block_samples(samples: &Array2<f64>, cols: std::ops::Range<usize>) -> Array2<f64> {
    samples.slice(s![.., cols]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{AlphaKind, GuidanceSchedules, NoiseSchedule};
    use crate::targets::GaussianMixture;

    fn experiment(mode: Mode, n: usize, k: usize) -> Experiment {
        let guidance = GuidanceSchedules {
            alpha_kind: AlphaKind::Linear,
            alpha_max: 0.3,
            beta_max: 1.0,
            snr: 0.1,
            beta_cap: None,
        };
        Experiment {
            model: DiffusionModel::new(GaussianMixture::two_mode_benchmark(), NoiseSchedule::vp(0.1, 20.0), guidance),
            grid: TimeGrid::new(1.0, k).unwrap(),
            reward: RewardField::NegativeQuadratic {
                center: vec![2.0, 2.0],
                scale: 1.0,
            },
            stein: SteinConfig::default(),
            settings: SamplerSettings {
                mode,
                num_particles: n,
                seed: 4,
                ..Default::default()
            },
            hit: HitCriteria {
                reward_threshold: -0.5,
                log_density_threshold: -6.0,
            },
        }
    }

    #[test]
    fn record_shape() {
        for mode in [Mode::Unguided, Mode::BaselineNoStein, Mode::Sdg] {
            let rec = run(&experiment(mode, 20, 50)).unwrap();
            assert!(rec.completed());
            assert_eq!(rec.rows.len(), 50);
            assert_eq!(rec.samples.dim(), (20, 2));
            assert!(rec.samples.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_guidance_sdg_equals_unguided() {
        let mut e = experiment(Mode::Sdg, 16, 40);
        for g in e.model.layout.guidance_mut() {
            g.alpha_max = 0.0;
            g.beta_max = 0.0;
        }
        e.stein.epsilon_override = Some(0.0);
        e.stein.renoise = Renoise::Off;
        let a = run(&e).unwrap();
        let b = run(&e.with_mode(Mode::Unguided)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn zero_epsilon_without_renoise_equals_baseline() {
        let mut e = experiment(Mode::Sdg, 16, 40);
        e.stein.epsilon_override = Some(0.0);
        e.stein.renoise = Renoise::Off;
        let a = run(&e).unwrap();
        let b = run(&e.with_mode(Mode::BaselineNoStein)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn zero_epsilon_with_paired_renoise_equals_baseline() {
        let mut e = experiment(Mode::Sdg, 16, 40);
        e.stein.epsilon_override = Some(0.0);
        e.stein.renoise = Renoise::Paired;
        let a = run(&e).unwrap();
        let b = run(&e.with_mode(Mode::BaselineNoStein)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn single_particle_run() {
        let rec = run(&experiment(Mode::Sdg, 1, 30)).unwrap();
        assert!(rec.completed());
        assert_eq!(rec.samples.nrows(), 1);
    }

    #[test]
    fn deterministic() {
        let e = experiment(Mode::Sdg, 12, 30);
        let a = run(&e).unwrap();
        let b = run(&e).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn identical_configs_compare_to_zero() {
        let e = experiment(Mode::BaselineNoStein, 10, 20);
        let c = compare(&e, &e, &[1, 2]).unwrap();
        for m in &c.metrics {
            assert_eq!(m.diff.mean, 0.0);
            assert_eq!(m.diff.std, 0.0);
        }
    }
}
