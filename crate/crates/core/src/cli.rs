//! Command-line entry point: `sample`, `bench`, `soc-value`, `schedules dump`
//! and `svgd`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_config, ExperimentConfig, OUT_DIR_ENV};
use crate::error::{ConfigIssue, Error, Result};
use crate::io::{metrics_csv, samples_csv, schedule_csv, trajectory_csv, write_atomic};
use crate::metrics::{moments, MetricReport};
use crate::rng::{Purpose, StreamKey};
use crate::sampler::{compare, run_with, summarize, RunStatus};
use crate::schedules::schedule_table;
use crate::soc::check_bound;
use crate::stein::{svgd, Bandwidth};

#[derive(Debug, Parser)]
#[command(name = "sdg", version, about = "Stein diffusion guidance on analytic targets")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the sampler and write metrics, samples and a summary.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dump_trajectories: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run two configs over several seeds and summarize paired metrics.
    Bench {
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Monte-Carlo value and its variational upper bound at the `[soc]` state.
    SocValue {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Schedule tables.
    Schedules {
        #[command(subcommand)]
        action: SchedulesAction,
    },
    /// Plain SVGD against the configured target.
    Svgd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        particles: usize,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0.3)]
        step: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SchedulesAction {
    /// Print `k, t, s, η, γ, σ, α` for every grid point as CSV.
    Dump {
        #[arg(long)]
        config: PathBuf,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 on failure (with error JSON on
/// stderr), 2 on usage errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(out) => {
            if !out.is_empty() {
                // a closed pipe downstream is not a failure of the command
                let _ = writeln!(std::io::stdout().lock(), "{out}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            1
        }
    }
}

pub fn error_json(e: &Error) -> String {
    let issues: &[ConfigIssue] = match e {
        Error::Config(issues) => issues,
        _ => &[],
    };
    json!({
        "error": {
            "kind": e.kind(),
            "message": e.to_string(),
            "issues": issues,
        }
    })
    .to_string()
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

fn out_root(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.output.dir.clone().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sdg-out"))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Serialize(e.to_string()))
}

fn execute(cli: Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::domain("--threads must be positive"));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Sample {
            config,
            seed,
            dump_trajectories,
            out_dir,
        } => cmd_sample(&config, seed, dump_trajectories, out_dir),
        Command::Bench {
            config_a,
            config_b,
            seeds,
            out_dir,
        } => cmd_bench(&config_a, &config_b, seeds, out_dir),
        Command::SocValue { config, seed } => cmd_soc_value(&config, seed),
        Command::Schedules {
            action: SchedulesAction::Dump { config, out },
        } => cmd_schedules(&config, out),
        Command::Svgd {
            config,
            particles,
            iters,
            step,
            seed,
            out_dir,
        } => cmd_svgd(&config, particles, iters, step, seed, out_dir),
    }
}

#[derive(Serialize)]
struct SampleSummary<'a> {
    config_hash: String,
    seed: u64,
    mode: &'static str,
    num_particles: usize,
    num_steps: usize,
    status: &'a RunStatus,
    metrics: MetricReport,
    files: Vec<String>,
    wall_clock_secs: f64,
}

fn cmd_sample(path: &Path, seed: Option<u64>, dump: bool, out_dir: Option<PathBuf>) -> Result<String> {
    let mut cfg = load(path)?;
    if let Some(s) = seed {
        cfg.sampler.seed = s;
    }
    let exp = cfg.experiment()?;
    let root = out_root(out_dir, &cfg);
    let prefix = &cfg.output.prefix;
    let dump = dump || cfg.output.dump_trajectories;
    let record = run_with(&exp, dump)?;
    let hash = cfg.hash()?;
    let mut files = Vec::new();
    let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
        write_atomic(&root.join(&name), &bytes)?;
        files.push(name);
        Ok(())
    };
    write(format!("{prefix}_metrics.csv"), metrics_csv(&record)?)?;
    write(format!("{prefix}_samples.csv"), samples_csv(&record.samples)?)?;
    if let Some(tr) = &record.trajectory {
        write(format!("{prefix}_trajectory.csv"), trajectory_csv(tr)?)?;
    }
    let mut report = MetricReport::new(hash.clone(), cfg.sampler.seed, Some(exp.grid.num_steps));
    if record.completed() {
        let s = summarize(&exp, &record.samples)?;
        report.push("hit_fraction", s.hit_fraction, None)?;
        report.push("in_support_fraction", s.in_support_fraction, None)?;
        report.push("mean_reward", s.mean_reward, None)?;
    }
    let summary_name = format!("{prefix}_summary.json");
    files.push(summary_name.clone());
    let summary = SampleSummary {
        config_hash: hash,
        seed: cfg.sampler.seed,
        mode: exp.settings.mode.as_str(),
        num_particles: exp.settings.num_particles,
        num_steps: exp.grid.num_steps,
        status: &record.status,
        metrics: report,
        files,
        wall_clock_secs: record.wall_clock_secs,
    };
    let text = to_json(&summary)?;
    write_atomic(&root.join(&summary_name), text.as_bytes())?;
    match &record.status {
        RunStatus::Completed => Ok(text),
        RunStatus::Aborted { step, .. } => Err(Error::NonFinite {
            step: *step,
            particle: 0,
        }),
    }
}

fn cmd_bench(a: &Path, b: &Path, seeds: u64, out_dir: Option<PathBuf>) -> Result<String> {
    if seeds == 0 {
        return Err(Error::domain("--seeds must be positive"));
    }
    let ca = load(a)?;
    let cb = load(b)?;
    let base = ca.sampler.seed;
    let seed_list: Vec<u64> = (0..seeds).map(|i| base + i).collect();
    let cmp = compare(&ca.experiment()?, &cb.experiment()?, &seed_list)?;
    let out = json!({
        "config_hash_a": ca.hash()?,
        "config_hash_b": cb.hash()?,
        "comparison": cmp,
    });
    let text = to_json(&out)?;
    write_atomic(&out_root(out_dir, &ca).join("bench_summary.json"), text.as_bytes())?;
    if !cmp.failed_seeds.is_empty() {
        return Err(Error::domain(format!("failed seeds: {:?}", cmp.failed_seeds)));
    }
    Ok(text)
}

fn cmd_soc_value(path: &Path, seed: Option<u64>) -> Result<String> {
    let cfg = load(path)?;
    let soc = cfg
        .soc
        .clone()
        .ok_or_else(|| Error::Config(vec![ConfigIssue::new("soc", "section required for soc-value")]))?;
    let exp = cfg.experiment()?;
    let soc_cfg = soc.build(seed.unwrap_or(cfg.sampler.seed));
    let check = check_bound(&soc.x, soc.t, &exp.model, &exp.grid, &exp.reward, &soc_cfg)?;
    to_json(&json!({
        "config_hash": cfg.hash()?,
        "x": soc.x,
        "t": soc.t,
        "value": check.value,
        "value_stderr": check.value_stderr,
        "surrogate": check.surrogate,
        "surrogate_stderr": check.surrogate_stderr,
        "bound_satisfied": check.bound_satisfied,
        "valid": check.valid,
    }))
}

fn cmd_schedules(path: &Path, out: Option<PathBuf>) -> Result<String> {
    let cfg = load(path)?;
    let exp = cfg.experiment()?;
    let block = &exp.model.layout.blocks()[0];
    let rows = schedule_table(&exp.grid, &block.sched, &block.guidance)?;
    let bytes = schedule_csv(&rows)?;
    match out {
        Some(p) => {
            write_atomic(&p, &bytes)?;
            Ok(String::new())
        }
        None => Ok(String::from_utf8(bytes)
            .map_err(|e| Error::Serialize(e.to_string()))?
            .trim_end()
            .to_string()),
    }
}

fn cmd_svgd(
    path: &Path,
    particles: usize,
    iters: usize,
    step: f64,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> Result<String> {
    let cfg = load(path)?;
    if particles == 0 || !(step > 0.0 && step.is_finite()) {
        return Err(Error::domain("--particles and --step must be positive"));
    }
    let target = cfg.target.build()?;
    let d = target.dim();
    let seed = seed.unwrap_or(cfg.sampler.seed);
    let init = Array2::from_shape_fn((particles, d), |(i, j)| {
        StreamKey::new(seed, Purpose::Sample, 0, i as u64).normal_vec(d)[j]
    });
    let x = svgd(init, &target, Bandwidth::Median, step, iters)?;
    let root = out_root(out_dir, &cfg);
    write_atomic(&root.join(format!("{}_svgd_samples.csv", cfg.output.prefix)), &samples_csv(&x)?)?;
    let (mean, cov) = moments(x.view());
    to_json(&json!({
        "particles": particles,
        "iters": iters,
        "step": step,
        "mean": mean,
        "target_mean": target.mean(),
        "cov": cov,
        "target_cov": target.covariance(),
    }))
}
