use ndarray::{Array2, Axis};
use sdg::diffusion::{forward_perturb, DiffusionModel, ParticleBatch, ScoreSource};
use sdg::metrics::{bruteforce_posterior_oracle, ksd_ustat, sliced_w1};
use sdg::rng::{Purpose, StreamKey};
use sdg::sampler::{run_with, Experiment, HitCriteria, Mode, SamplerSettings};
use sdg::schedules::{AlphaKind, GuidanceSchedules, NoiseSchedule, TimeGrid};
use sdg::stein::{stein_correct, SteinConfig};
use sdg::targets::{GaussianMixture, RewardField};

fn guidance() -> GuidanceSchedules {
    GuidanceSchedules {
        alpha_kind: AlphaKind::Linear,
        alpha_max: 0.3,
        beta_max: 0.3,
        snr: 0.1,
        beta_cap: None,
    }
}

fn benchmark_model() -> DiffusionModel {
    DiffusionModel::new(GaussianMixture::two_mode_benchmark(), NoiseSchedule::vp(0.1, 20.0), guidance())
}

fn rms_oracle_error(model: &DiffusionModel, grid: &TimeGrid, m: usize, reps: u64) -> f64 {
    let sched = &model.layout.blocks()[0].sched;
    let x = [0.3, -0.4];
    let t = 0.7;
    let exact = model.target.exact_posterior(sched, t, &x).unwrap().mean();
    let mut ss = 0.0;
    for r in 0..reps {
        let o = bruteforce_posterior_oracle(&x, t, model, grid, m, 1000 + r).unwrap();
        ss += o.mean.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    (ss / reps as f64).sqrt()
}

#[test]
fn oracle_error_halves_when_trajectories_quadruple() {
    let model = DiffusionModel::new(
        GaussianMixture::new(vec![1.0], vec![vec![1.0, -0.5]], vec![vec![0.6, 0.2, 0.2, 0.9]]).unwrap(),
        NoiseSchedule::vp(0.1, 20.0),
        guidance(),
    );
    let grid = TimeGrid::new(1.0, 1000).unwrap();
    let coarse = rms_oracle_error(&model, &grid, 1000, 100);
    let fine = rms_oracle_error(&model, &grid, 4000, 100);
    let ratio = coarse / fine;
    assert!((1.6..=2.5).contains(&ratio), "{coarse} / {fine} = {ratio}");
}

#[test]
fn unguided_run_tracks_the_noisy_marginal() {
    let model = benchmark_model();
    let exp = Experiment {
        model: model.clone(),
        grid: TimeGrid::new(1.0, 400).unwrap(),
        reward: RewardField::Linear { direction: vec![1.0, 0.0] },
        stein: SteinConfig::default(),
        settings: SamplerSettings {
            mode: Mode::Unguided,
            num_particles: 4000,
            seed: 9,
            ..SamplerSettings::default()
        },
        hit: HitCriteria {
            reward_threshold: 0.0,
            log_density_threshold: -6.0,
        },
    };
    let rec = run_with(&exp, true).unwrap();
    let traj = rec.trajectory.unwrap();
    let sched = &model.layout.blocks()[0].sched;
    for k in [100, 200, 300] {
        let t = exp.grid.time(k);
        let marginal = model.target.noisy_marginal(sched, t).unwrap();
        let direct = Array2::from_shape_fn((4000, 2), |(i, j)| {
            marginal.sample(&mut StreamKey::new(9, Purpose::Test, k as u64, i as u64).rng())[j]
        });
        let w = sliced_w1(traj[k].view(), direct.view(), 32, k as u64).unwrap();
        assert!(w < 0.06, "t = {t}: sliced W1 {w}");
    }
}

#[test]
fn exact_score_correction_does_not_increase_ksd() {
    let model = benchmark_model();
    let sched = &model.layout.blocks()[0].sched;
    let cfg = SteinConfig {
        score_source: ScoreSource::ExactConditional,
        n_corrector_steps: 3,
        ..SteinConfig::default()
    };
    let n = 150;
    for state in 0..10u64 {
        let t = 0.35 + 0.05 * state as f64;
        let mut rng = StreamKey::new(state, Purpose::Test, 0, 0).rng();
        let mut noisy = Array2::zeros((n, 2));
        for (i, mut row) in noisy.axis_iter_mut(Axis(0)).enumerate() {
            let x0 = model.target.sample(&mut rng);
            let z = StreamKey::new(state, Purpose::Test, 1, i as u64).normal_vec(2);
            let xt = forward_perturb(&x0, sched, t, &z).unwrap();
            row.assign(&ndarray::ArrayView1::from(&xt[..]));
        }
        let batch = ParticleBatch::new(0, state, noisy).unwrap();
        let (coeffs, marginal) = model.marginal(t).unwrap();
        let ksd = |b: &ParticleBatch, h: f64| {
            let s = sdg::diffusion::conditional_scores(
                b.clean.view(),
                b.noisy.view(),
                &coeffs,
                &model.target,
                &marginal,
                ScoreSource::ExactConditional,
            );
            ksd_ustat(b.clean.view(), s.view(), h).unwrap()
        };
        let (start, _) = stein_correct(&batch, &model, t, &SteinConfig { epsilon_override: Some(0.0), ..cfg }).unwrap();
        let (end, diags) = stein_correct(&batch, &model, t, &cfg).unwrap();
        let h = diags[0].bandwidth;
        assert!(ksd(&end, h) <= ksd(&start, h), "state {state}");
    }
}
