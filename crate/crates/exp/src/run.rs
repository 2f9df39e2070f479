//! Single experiments: one trace per seed, metric CSVs and a manifest.

use std::path::{Path, PathBuf};

use bdtd_core::adversary::AttackModel;
use bdtd_core::aggregation::AggregationRule;
use bdtd_core::protocol::{run_bdtd, RunTrace};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Prepared, Setup, SCHEMA_VERSION};
use crate::error::Result;
use crate::output::{self, CSV_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_msbe: f64,
    pub final_ce: f64,
    pub metrics_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub csv_version: u32,
    pub name: String,
    pub config_hash: String,
    /// Hash of the resolved protocol settings (radius filled in).
    pub protocol_hash: String,
    pub radius: Option<f64>,
    pub horizon: usize,
    pub contributing_runs: usize,
    pub runs: Vec<SeedSummary>,
    pub mean_file: String,
    pub mean_final_msbe: f64,
    pub mean_final_ce: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Per-seed traces of one (rule, attack, Byzantine set) over a prepared setup,
/// computed in parallel and returned in seed order.
pub fn run_seeds(
    setup: &Setup,
    prepared: &Prepared,
    rule: &AggregationRule,
    attack: &AttackModel,
    byzantine: &[usize],
    record_params: bool,
) -> Result<Vec<RunTrace>> {
    let mut protocol = setup.protocol(prepared, rule, attack)?;
    protocol.record_params = record_params;
    let roster = setup.roster(prepared, byzantine.to_vec())?;
    setup
        .seeds
        .par_iter()
        .map(|&seed| Ok(run_bdtd(&prepared.mdp, &prepared.policy, &prepared.features, &roster, &protocol, seed)?))
        .collect()
}

/// Runs every seed and writes a fresh directory under `root`.
pub fn run_experiment(config: &ExperimentConfig, root: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let setup = &config.setup;
    let prepared = setup.prepare()?;
    let protocol = setup.protocol(&prepared, &config.rule, &config.attack)?;
    log::info!("{}: {} seeds x {} rounds", config.name, setup.seeds.len(), setup.horizon);
    let traces = run_seeds(
        setup,
        &prepared,
        &config.rule,
        &config.attack,
        &setup.agents.byzantine,
        config.export_traces,
    )?;

    let hash = config.hash();
    let dir = output::fresh_run_dir(root, &config.name, &hash)?;
    output::write_json(&dir.join("config.json"), config)?;
    let mut runs = Vec::with_capacity(traces.len());
    for trace in &traces {
        let metrics_file = format!("metrics_seed_{}.csv", trace.seed);
        output::write_run_metrics(&dir.join(&metrics_file), trace)?;
        let trace_file = if config.export_traces {
            let name = format!("trace_seed_{}.csv", trace.seed);
            output::write_trace(&dir.join(&name), trace)?;
            Some(name)
        } else {
            None
        };
        let h = trace.horizon();
        runs.push(SeedSummary {
            seed: trace.seed,
            final_msbe: trace.msbe(h)?,
            final_ce: trace.ce(h).unwrap_or(0.0),
            metrics_file,
            trace_file,
        });
    }

    let msbe: Vec<Vec<f64>> = traces.iter().map(|t| t.msbe_series()).collect();
    let ce: Vec<Vec<f64>> = traces.iter().map(|t| t.ce_series()).collect();
    let mean_msbe = output::mean_series(&msbe);
    let mean_ce = output::mean_series(&ce);
    let mean_file = "metrics_mean.csv".to_string();
    output::write_series_csv(&dir.join(&mean_file), &["msbe", "ce"], &[&mean_msbe, &mean_ce])?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        csv_version: CSV_VERSION,
        name: config.name.clone(),
        config_hash: hash,
        protocol_hash: protocol.hash(),
        radius: prepared.radius,
        horizon: setup.horizon,
        contributing_runs: runs.len(),
        runs,
        mean_file,
        mean_final_msbe: *mean_msbe.last().unwrap_or(&0.0),
        mean_final_ce: *mean_ce.last().unwrap_or(&0.0),
    };
    output::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(RunOutcome { dir, manifest })
}
