use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sdg(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdg"));
    cmd.args(args).env_remove("SDG_OUT_DIR");
    if let Some(p) = env_out {
        cmd.env("SDG_OUT_DIR", p);
    }
    cmd.output().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("c.toml");
    std::fs::write(
        &p,
        format!("[grid]\nnum_steps = 40\n\n[sampler]\nnum_particles = 60\n{extra}"),
    )
    .unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn schedules_dump_has_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = sdg(&["schedules", "dump", "--config", s(&cfg)], None);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,t,s,eta,gamma,sigma,alpha");
    assert_eq!(lines.len(), 1 + 41);
    assert!(lines[41].starts_with("40,1,0,"));
}

#[test]
fn bad_flags_exit_with_usage() {
    let out = sdg(&["sample", "--no-such-flag"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn failures_emit_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[target]\nkind = \"mixture\"\nweights = [0.5, 0.6]\nmeans = [[0.0], [1.0]]\nvariances = [[1.0], [1.0]]\n").unwrap();
    let out = sdg(&["sample", "--config", s(&cfg)], None);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "config");
    assert!(v["error"]["message"].as_str().unwrap().contains("sum to 1"));
    assert_eq!(v["error"]["issues"][0]["path"], "target");
}

#[test]
fn sample_writes_outputs_and_honors_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "seed = 3\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(sdg(&["sample", "--config", s(&cfg), "--out-dir", s(&a)], None).status.success());
    assert!(sdg(&["sample", "--config", s(&cfg), "--seed", "4", "--out-dir", s(&b)], None).status.success());
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    // atomic writes leave no temporary files behind
    assert_eq!(names, ["run_metrics.csv", "run_samples.csv", "run_summary.json"]);
    let sa: Value = serde_json::from_str(&std::fs::read_to_string(a.join("run_summary.json")).unwrap()).unwrap();
    let sb: Value = serde_json::from_str(&std::fs::read_to_string(b.join("run_summary.json")).unwrap()).unwrap();
    assert_eq!(sa["seed"], 3);
    assert_eq!(sb["seed"], 4);
    assert_eq!(sa["status"]["status"], "completed");
    // the hash covers the effective config, seed included
    assert_ne!(sa["config_hash"], sb["config_hash"]);
    assert!(sa["wall_clock_secs"].as_f64().unwrap() >= 0.0);
    let metrics = std::fs::read_to_string(a.join("run_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 40);
    let samples = std::fs::read_to_string(a.join("run_samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 60);
    assert_ne!(samples, std::fs::read_to_string(b.join("run_samples.csv")).unwrap());
}

#[test]
fn output_root_falls_back_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let env_dir = dir.path().join("from-env");
    let out = sdg(&["sample", "--config", s(&cfg), "--dump-trajectories"], Some(&env_dir));
    assert!(out.status.success());
    assert!(env_dir.join("run_trajectory.csv").exists());
    let traj = std::fs::read_to_string(env_dir.join("run_trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 41 * 60);
}

#[test]
fn bench_reports_per_seed_pairs_and_mean_std() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_config(dir.path(), "");
    let b = dir.path().join("b.toml");
    std::fs::write(&b, "[grid]\nnum_steps = 40\n\n[sampler]\nnum_particles = 60\nmode = \"unguided\"\n").unwrap();
    let out_dir = dir.path().join("o");
    let out = sdg(
        &["bench", "--config-a", s(&a), "--config-b", s(&b), "--seeds", "3", "--out-dir", s(&out_dir)],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let cmp = &v["comparison"];
    assert_eq!(cmp["mode_a"], "sdg");
    assert_eq!(cmp["mode_b"], "unguided");
    assert_eq!(cmp["per_seed"].as_array().unwrap().len(), 3);
    let hit = cmp["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == "hit_fraction")
        .unwrap();
    let per: Vec<f64> = cmp["per_seed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["a"]["hit_fraction"].as_f64().unwrap())
        .collect();
    let mean = per.iter().sum::<f64>() / 3.0;
    assert!((hit["a"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!(hit["a"]["std"].as_f64().unwrap() >= 0.0);
    assert!(out_dir.join("bench_summary.json").exists());
}

#[test]
fn soc_value_requires_section_and_reports_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = sdg(&["soc-value", "--config", s(&cfg)], None);
    assert_eq!(out.status.code(), Some(1));
    let cfg = small_config(
        dir.path(),
        "\n[soc]\nx = [0.5, 0.5]\nt = 0.6\nnum_trajectories = 300\nk_mc = 300\n",
    );
    let out = sdg(&["soc-value", "--config", s(&cfg), "--seed", "2"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["value", "value_stderr", "surrogate", "surrogate_stderr"] {
        assert!(v[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert!(v["bound_satisfied"].is_boolean());
}

#[test]
fn svgd_writes_particles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[target]\nkind = \"standard_normal\"\ndim = 2\n\n[reward]\nkind = \"linear\"\ndirection = [1.0, 0.0]\n").unwrap();
    let out_dir = dir.path().join("o");
    let out = sdg(
        &["svgd", "--config", s(&cfg), "--particles", "50", "--iters", "200", "--out-dir", s(&out_dir)],
        None,
    );
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mean"].as_array().unwrap().len(), 2);
    let rows = std::fs::read_to_string(out_dir.join("run_svgd_samples.csv")).unwrap();
    assert_eq!(rows.lines().count(), 51);
}
