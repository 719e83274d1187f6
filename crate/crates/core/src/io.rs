//! Atomic file output and CSV rendering of run artifacts.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::sampler::RunRecord;
use crate::schedules::ScheduleRow;

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Serialize(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(csv_err)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Column suffixes for the blocks of a run: none for a single block,
/// `_x` / `_e` for two.
pub fn block_suffixes(n_blocks: usize) -> Vec<String> {
    match n_blocks {
        1 => vec![String::new()],
        2 => vec!["_x".into(), "_e".into()],
        n => (0..n).map(|i| format!("_{i}")).collect(),
    }
}

/// One header row and one row per recorded step.
pub fn metrics_csv(record: &RunRecord) -> Result<Vec<u8>> {
    let n_blocks = record.rows.first().map_or(1, |r| r.blocks.len());
    let mut header = vec!["step".to_string(), "t".to_string()];
    for suf in block_suffixes(n_blocks) {
        for name in ["alpha", "beta", "epsilon", "bandwidth", "phi_norm", "ksd_before", "ksd_after"] {
            header.push(format!("{name}{suf}"));
        }
    }
    for name in ["mean_reward", "mean_score_norm", "ksd", "in_support", "hit"] {
        header.push(name.into());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(csv_err)?;
    for r in &record.rows {
        let mut row = vec![r.step.to_string(), r.t.to_string()];
        for b in &r.blocks {
            row.extend([
                b.alpha.to_string(),
                b.beta.to_string(),
                b.epsilon.to_string(),
                opt(b.bandwidth),
                b.phi_norm.to_string(),
                opt(b.ksd_before),
                opt(b.ksd_after),
            ]);
        }
        row.extend([
            r.mean_reward.to_string(),
            r.mean_score_norm.to_string(),
            opt(r.ksd),
            r.in_support.to_string(),
            r.hit.to_string(),
        ]);
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}

fn coord_header(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

pub fn samples_csv(samples: &Array2<f64>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(coord_header(samples.ncols())).map_err(csv_err)?;
    for row in samples.axis_iter(Axis(0)) {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    finish(w)
}

/// Long format: one row per (step, particle).
pub fn trajectory_csv(states: &[Array2<f64>]) -> Result<Vec<u8>> {
    let d = states.first().map_or(0, |s| s.ncols());
    let mut header = vec!["step".to_string(), "particle".to_string()];
    header.extend(coord_header(d));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(csv_err)?;
    for (k, s) in states.iter().enumerate() {
        for (i, row) in s.axis_iter(Axis(0)).enumerate() {
            let mut rec = vec![k.to_string(), i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    finish(w)
}

pub fn schedule_csv(rows: &[ScheduleRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "t", "s", "eta", "gamma", "sigma", "alpha"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.t.to_string(),
            r.s.to_string(),
            r.eta.to_string(),
            r.gamma.to_string(),
            r.sigma.to_string(),
            r.alpha.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        let leftovers = std::fs::read_dir(p.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn samples_round_trip_exactly() {
        let s = array![[0.1, -2.5e-17], [1.0 / 3.0, 7.0]];
        let text = String::from_utf8(samples_csv(&s).unwrap()).unwrap();
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let back: Vec<Vec<f64>> = r
            .records()
            .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(back, vec![vec![0.1, -2.5e-17], vec![1.0 / 3.0, 7.0]]);
    }
}
