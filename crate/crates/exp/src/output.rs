//! Run directories and CSV files.
//!
//! Metric CSVs (version [`CSV_VERSION`]):
//! - `metrics_seed_<seed>.csv`: `round,sbe,msbe,ce`
//! - `metrics_mean.csv`: `round,msbe,ce`, the mean over seeds
//! - `trace_seed_<seed>.csv`: `round,agent,role,w0..w{d-1},td_error,ce_term`
//!
//! `round` is the 1-based update count `k`. In traces, `w` is the parameter
//! held at the start of round `k` and `ce_term` is `||w_i - w_bar||^2 / |N|`
//! over normal agents (empty for Byzantine rows).

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use bdtd_core::protocol::RunTrace;

use crate::error::{io_err, ExpError, Result};

pub const CSV_VERSION: u32 = 1;

pub const OUTPUT_ROOT_ENV: &str = "BDTD_OUTPUT_ROOT";

/// Creates `<root>/<name>-<hash8>-<NNN>` using the first unused counter, so a
/// finished run directory is never written into again.
pub fn fresh_run_dir(root: &Path, name: &str, hash: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let stem = format!("{name}-{}", &hash[..8.min(hash.len())]);
    for counter in 0..100_000u32 {
        let dir = root.join(format!("{stem}-{counter:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(ExpError::Io { path: dir, source: e }),
        }
    }
    Err(ExpError::Config(format!("no free run id under {}", root.display())))
}

/// Shortest round-trip form; exponent notation outside `[1e-4, 1e15)`.
pub fn fmt(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

/// Writes `header` and one row per index; columns are `round` then `series`.
pub fn write_series_csv(path: &Path, header: &[&str], series: &[&[f64]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["round"];
    head.extend_from_slice(header);
    w.write_record(&head)?;
    let len = series.first().map_or(0, |s| s.len());
    for k in 0..len {
        let mut row = vec![(k + 1).to_string()];
        row.extend(series.iter().map(|s| fmt(s[k])));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_run_metrics(path: &Path, trace: &RunTrace) -> Result<()> {
    let sbe = trace.sbe_series();
    let msbe = trace.msbe_series();
    let ce = trace.ce_series();
    write_series_csv(path, &["sbe", "msbe", "ce"], &[&sbe, &msbe, &ce])
}

/// Needs a trace recorded with parameters.
pub fn write_trace(path: &Path, trace: &RunTrace) -> Result<()> {
    let first = trace.rounds.first();
    if first.is_some_and(|r| r.params.is_empty()) {
        return Err(ExpError::Config("trace export needs recorded parameters".into()));
    }
    let dim = trace.final_params.first().map_or(0, |p| p.dim());
    let n = trace.final_params.len();
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["round".to_string(), "agent".into(), "role".into()];
    head.extend((0..dim).map(|c| format!("w{c}")));
    head.push("td_error".into());
    head.push("ce_term".into());
    w.write_record(&head)?;
    let normal_count = trace.normal.len().max(1) as f64;
    for (k, round) in trace.rounds.iter().enumerate() {
        let mut mean = vec![0.0; dim];
        for &i in &trace.normal {
            for (m, x) in mean.iter_mut().zip(round.params[i].iter()) {
                *m += x / normal_count;
            }
        }
        for agent in 0..n {
            let normal = trace.normal.contains(&agent);
            let p = &round.params[agent];
            let mut row = vec![(k + 1).to_string(), agent.to_string(), if normal { "normal" } else { "byzantine" }.into()];
            row.extend(p.iter().map(|&x| fmt(x)));
            row.push(fmt(round.td_errors[agent]));
            if normal {
                let sq: f64 = p.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum();
                row.push(fmt(sq / normal_count));
            } else {
                row.push(String::new());
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Element-wise mean of equally long series.
pub fn mean_series(series: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = series.first() else {
        return Vec::new();
    };
    let count = series.len() as f64;
    (0..first.len()).map(|k| series.iter().map(|s| s[k]).sum::<f64>() / count).collect()
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}
