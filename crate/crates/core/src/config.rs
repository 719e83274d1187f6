//! Experiment configuration files.
//!
//! A config is TOML with sections `target`, `reward`, `schedule`, `grid`,
//! `guidance`, `stein`, `sampler`, `output` and the optional `blocks` and
//! `soc`. Every field has a default; unknown keys are rejected. Parsing
//! either yields a fully validated [`ExperimentConfig`] or the full list of
//! problems, each located by its dotted key path.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DiffusionModel, Pullback, ScoreSource};
use crate::error::{ConfigIssue, Error, Result};
use crate::multicomponent::{block_model, BlockSpec};
use crate::sampler::{Experiment, HitCriteria, Mode, SamplerSettings};
use crate::schedules::{AlphaKind, GuidanceSchedules, NoiseSchedule, ScheduleKind, TimeGrid, DEFAULT_GAMMA_FLOOR};
use crate::soc::SocConfig;
use crate::stein::{Bandwidth, Renoise, SteinConfig};
use crate::targets::{GaussianMixture, RewardField};

/// Environment variable holding the default output root.
pub const OUT_DIR_ENV: &str = "SDG_OUT_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    /// 2-D mixture with weights 0.95 / 0.05.
    #[default]
    TwoModeBenchmark,
    StandardNormal { dim: usize },
    /// Either `covariances` (row-major `d × d`) or `variances` (diagonal)
    /// per component.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covariances: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        variances: Option<Vec<Vec<f64>>>,
    },
}

impl TargetConfig {
    pub fn build(&self) -> Result<GaussianMixture> {
        match self {
            TargetConfig::TwoModeBenchmark => Ok(GaussianMixture::two_mode_benchmark()),
            TargetConfig::StandardNormal { dim } => {
                if *dim == 0 {
                    return Err(Error::domain("dim must be positive"));
                }
                Ok(GaussianMixture::standard_normal(*dim))
            }
            TargetConfig::Mixture {
                weights,
                means,
                covariances,
                variances,
            } => match (covariances, variances) {
                (Some(c), None) => GaussianMixture::new(weights.clone(), means.clone(), c.clone()),
                (None, Some(v)) => GaussianMixture::from_diagonals(weights.clone(), means.clone(), v.clone()),
                _ => Err(Error::domain("give exactly one of covariances or variances")),
            },
        }
    }
}

fn default_reward() -> RewardField {
    RewardField::NegativeQuadratic {
        center: vec![2.0, 2.0],
        scale: 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Vp {
        #[serde(default = "d_beta_min")]
        beta_min: f64,
        #[serde(default = "d_beta_max")]
        beta_max: f64,
        #[serde(default = "d_floor")]
        gamma_floor: f64,
    },
    Ve {
        #[serde(default = "d_sigma_min")]
        sigma_min: f64,
        #[serde(default = "d_sigma_max")]
        sigma_max: f64,
        #[serde(default = "d_floor")]
        gamma_floor: f64,
    },
}

fn d_beta_min() -> f64 {
    0.1
}
fn d_beta_max() -> f64 {
    20.0
}
fn d_sigma_min() -> f64 {
    0.01
}
fn d_sigma_max() -> f64 {
    50.0
}
fn d_floor() -> f64 {
    DEFAULT_GAMMA_FLOOR
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Vp {
            beta_min: d_beta_min(),
            beta_max: d_beta_max(),
            gamma_floor: d_floor(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self, horizon: f64) -> NoiseSchedule {
        match *self {
            ScheduleConfig::Vp {
                beta_min,
                beta_max,
                gamma_floor,
            } => NoiseSchedule::vp(beta_min, beta_max).with_gamma_floor(gamma_floor),
            ScheduleConfig::Ve {
                sigma_min,
                sigma_max,
                gamma_floor,
            } => NoiseSchedule::ve(sigma_min, sigma_max).with_gamma_floor(gamma_floor),
        }
        .with_horizon(horizon)
    }

    pub fn from_schedule(s: &NoiseSchedule) -> Self {
        match s.kind {
            ScheduleKind::Vp { beta_min, beta_max } => ScheduleConfig::Vp {
                beta_min,
                beta_max,
                gamma_floor: s.gamma_floor,
            },
            ScheduleKind::Ve { sigma_min, sigma_max } => ScheduleConfig::Ve {
                sigma_min,
                sigma_max,
                gamma_floor: s.gamma_floor,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub num_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            num_steps: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub alpha_kind: AlphaKind,
    pub alpha_max: f64,
    pub beta_max: f64,
    pub snr: f64,
    /// Upper clamp on `β(t)`; absent means `10 · beta_max`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_cap: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha_kind: AlphaKind::Linear,
            alpha_max: 0.3,
            beta_max: 0.3,
            snr: 0.1,
            beta_cap: None,
        }
    }
}

impl GuidanceConfig {
    pub fn build(&self) -> GuidanceSchedules {
        GuidanceSchedules {
            alpha_kind: self.alpha_kind,
            alpha_max: self.alpha_max,
            beta_max: self.beta_max,
            snr: self.snr,
            beta_cap: self.beta_cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthPolicy {
    Median,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteinSection {
    pub bandwidth: BandwidthPolicy,
    /// Used when `bandwidth = "fixed"`.
    pub fixed_bandwidth: f64,
    pub n_corrector_steps: usize,
    pub score_source: ScoreSource,
    pub renoise: Renoise,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_override: Option<f64>,
    /// `0` disables the cap.
    pub trust_radius: f64,
}

impl Default for SteinSection {
    fn default() -> Self {
        Self {
            bandwidth: BandwidthPolicy::Median,
            fixed_bandwidth: 1.0,
            n_corrector_steps: 1,
            score_source: ScoreSource::Surrogate,
            renoise: Renoise::Off,
            epsilon_override: None,
            trust_radius: 0.5,
        }
    }
}

impl SteinSection {
    pub fn build(&self, track_ksd: bool) -> SteinConfig {
        SteinConfig {
            bandwidth: match self.bandwidth {
                BandwidthPolicy::Median => Bandwidth::Median,
                BandwidthPolicy::Fixed => Bandwidth::Fixed(self.fixed_bandwidth),
            },
            n_corrector_steps: self.n_corrector_steps,
            score_source: self.score_source,
            renoise: self.renoise,
            epsilon_override: self.epsilon_override,
            track_ksd,
            trust_radius: (self.trust_radius != 0.0).then_some(self.trust_radius),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub mode: Mode,
    pub num_particles: usize,
    pub seed: u64,
    pub warmup_eta: f64,
    pub pullback: Pullback,
    pub reuse_corrected: bool,
    pub track_ksd: bool,
    pub metric_cadence: usize,
    pub reward_threshold: f64,
    pub log_density_threshold: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerSettings::default();
        Self {
            mode: s.mode,
            num_particles: s.num_particles,
            seed: s.seed,
            warmup_eta: s.warmup_eta,
            pullback: s.pullback,
            reuse_corrected: s.reuse_corrected,
            track_ksd: s.track_ksd,
            metric_cadence: s.metric_cadence,
            reward_threshold: -0.5,
            log_density_threshold: -6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Output root; absent means `$SDG_OUT_DIR`, else `sdg-out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    pub prefix: String,
    pub dump_trajectories: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            prefix: "run".into(),
            dump_trajectories: false,
        }
    }
}

/// Splits the coordinates into a node block `X` (the first `x_dim`) and an
/// edge block `E` (the rest) with its own schedule and guidance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlocksConfig {
    pub x_dim: usize,
    #[serde(default)]
    pub edge_schedule: ScheduleConfig,
    #[serde(default)]
    pub edge_guidance: GuidanceConfig,
}

/// State and weights for `soc-value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocSection {
    pub x: Vec<f64>,
    pub t: f64,
    pub num_trajectories: usize,
    pub alpha: f64,
    pub beta: f64,
    pub fd_step: f64,
    pub proposal_cov_scale: f64,
    pub match_posterior_cov: bool,
    pub k_mc: usize,
}

impl Default for SocSection {
    fn default() -> Self {
        let c = SocConfig::default();
        Self {
            x: vec![0.0, 0.0],
            t: 0.5,
            num_trajectories: c.num_trajectories,
            alpha: c.alpha,
            beta: c.beta,
            fd_step: c.fd_step,
            proposal_cov_scale: c.proposal_cov_scale,
            match_posterior_cov: c.match_posterior_cov,
            k_mc: c.k_mc,
        }
    }
}

impl SocSection {
    pub fn build(&self, seed: u64) -> SocConfig {
        SocConfig {
            num_trajectories: self.num_trajectories,
            alpha: self.alpha,
            beta: self.beta,
            fd_step: self.fd_step,
            proposal_cov_scale: self.proposal_cov_scale,
            match_posterior_cov: self.match_posterior_cov,
            k_mc: self.k_mc,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetConfig,
    pub reward: RewardField,
    pub schedule: ScheduleConfig,
    pub grid: GridConfig,
    pub guidance: GuidanceConfig,
    pub stein: SteinSection,
    pub sampler: SamplerSection,
    pub output: OutputConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<BlocksConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soc: Option<SocSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            target: TargetConfig::default(),
            reward: default_reward(),
            schedule: ScheduleConfig::default(),
            grid: GridConfig::default(),
            guidance: GuidanceConfig::default(),
            stein: SteinSection::default(),
            sampler: SamplerSection::default(),
            output: OutputConfig::default(),
            blocks: None,
            soc: None,
        }
    }
}

fn issue<T>(issues: &mut Vec<ConfigIssue>, path: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            let reason = match e {
                Error::Domain(m) => m,
                other => other.to_string(),
            };
            issues.push(ConfigIssue::new(path, reason));
            None
        }
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let path = e
            .span()
            .map(|sp| locate(text, sp.start))
            .unwrap_or_default();
        Error::Config(vec![ConfigIssue::new(path, e.message().trim().to_string())])
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// `line L, column C` of a byte offset.
fn locate(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    format!("line {line}, column {col}")
}

impl ExperimentConfig {
    /// Every invariant of the referenced types, collected rather than
    /// failing on the first.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let target = issue(&mut issues, "target", self.target.build());
        issue(&mut issues, "reward", self.reward.validate());
        if let Some(t) = &target {
            if self.reward.dim() != t.dim() {
                issues.push(ConfigIssue::new(
                    "reward",
                    format!("reward has dimension {} but the target has {}", self.reward.dim(), t.dim()),
                ));
            }
        }
        issue(
            &mut issues,
            "grid",
            TimeGrid::new(self.grid.horizon, self.grid.num_steps).map(|_| ()),
        );
        issue(&mut issues, "schedule", self.schedule.build(self.grid.horizon.max(1e-300)).validate());
        issue(&mut issues, "guidance", self.guidance.build().validate());
        issue(&mut issues, "stein", self.stein.build(false).validate());
        if self.stein.trust_radius < 0.0 {
            issues.push(ConfigIssue::new("stein.trust_radius", "must be >= 0"));
        }
        let s = &self.sampler;
        if s.num_particles == 0 {
            issues.push(ConfigIssue::new("sampler.num_particles", "must be positive"));
        }
        if s.metric_cadence == 0 {
            issues.push(ConfigIssue::new("sampler.metric_cadence", "must be positive"));
        }
        if !(0.0..1.0).contains(&s.warmup_eta) {
            issues.push(ConfigIssue::new("sampler.warmup_eta", "must lie in [0, 1)"));
        }
        for (name, v) in [
            ("sampler.reward_threshold", s.reward_threshold),
            ("sampler.log_density_threshold", s.log_density_threshold),
        ] {
            if v.is_nan() || v == f64::INFINITY {
                issues.push(ConfigIssue::new(name, "must be a number below +inf"));
            }
        }
        if self.output.prefix.is_empty() || self.output.prefix.contains(['/', '\\']) {
            issues.push(ConfigIssue::new("output.prefix", "must be a non-empty file name"));
        }
        if let Some(b) = &self.blocks {
            issue(&mut issues, "blocks.edge_schedule", b.edge_schedule.build(1.0).validate());
            issue(&mut issues, "blocks.edge_guidance", b.edge_guidance.build().validate());
            if let Some(t) = &target {
                if b.x_dim > t.dim() {
                    issues.push(ConfigIssue::new(
                        "blocks.x_dim",
                        format!("exceeds the target dimension {}", t.dim()),
                    ));
                }
            }
        }
        if let Some(soc) = &self.soc {
            issue(&mut issues, "soc", soc.build(0).validate());
            if let Some(t) = &target {
                if soc.x.len() != t.dim() {
                    issues.push(ConfigIssue::new("soc.x", format!("must have length {}", t.dim())));
                }
            }
            if !(soc.t >= 0.0 && soc.t <= self.grid.horizon) {
                issues.push(ConfigIssue::new("soc.t", "must lie in [0, horizon]"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    /// SHA-256 of the canonical serialized form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn model(&self) -> Result<DiffusionModel> {
        let target = self.target.build()?;
        let horizon = self.grid.horizon;
        let sched = self.schedule.build(horizon);
        let guidance = self.guidance.build();
        match &self.blocks {
            None => Ok(DiffusionModel::new(target, sched, guidance)),
            Some(b) => {
                let d = target.dim();
                block_model(
                    target,
                    BlockSpec {
                        dim: b.x_dim,
                        sched,
                        guidance,
                    },
                    BlockSpec {
                        dim: d - b.x_dim,
                        sched: b.edge_schedule.build(horizon),
                        guidance: b.edge_guidance.build(),
                    },
                )
            }
        }
    }

    pub fn experiment(&self) -> Result<Experiment> {
        self.validate()?;
        let s = &self.sampler;
        let exp = Experiment {
            model: self.model()?,
            grid: TimeGrid::new(self.grid.horizon, self.grid.num_steps)?,
            reward: self.reward.clone(),
            stein: self.stein.build(s.track_ksd),
            settings: SamplerSettings {
                mode: s.mode,
                num_particles: s.num_particles,
                seed: s.seed,
                warmup_eta: s.warmup_eta,
                pullback: s.pullback,
                reuse_corrected: s.reuse_corrected,
                track_ksd: s.track_ksd,
                metric_cadence: s.metric_cadence,
            },
            hit: HitCriteria {
                reward_threshold: s.reward_threshold,
                log_density_threshold: s.log_density_threshold,
            },
        };
        exp.validate()?;
        Ok(exp)
    }
}
