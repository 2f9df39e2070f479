//! Method x attack comparisons over one environment, with per-attack charts.

use std::path::{Path, PathBuf};

use bdtd_core::adversary::AttackModel;
use bdtd_core::aggregation::AggregationRule;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{canonical_hash, slug, ExperimentConfig, MatrixConfig, Setup, SCHEMA_VERSION};
use crate::error::{ExpError, Result};
use crate::output::{self, CSV_VERSION};
use crate::plot::{chart_from_csv, Scale};
use crate::run::run_seeds;

/// Label of the fault-free FedAvg line.
pub const REFERENCE_LABEL: &str = "FedAvg w/o attacks";

/// One (method, attack) pairing; `attack` is `None` for the reference line.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCell {
    pub method: String,
    pub attack: Option<String>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPlan {
    pub name: String,
    pub hash: String,
    pub methods: Vec<String>,
    pub attacks: Vec<String>,
    pub cells: Vec<MatrixCell>,
    pub reference: Option<MatrixCell>,
}

impl MatrixPlan {
    pub fn from_config(matrix: &MatrixConfig) -> Result<Self> {
        matrix.validate()?;
        let cell = |method: &str, attack: Option<&str>, rule: &AggregationRule, model: &AttackModel, byzantine: Vec<usize>| {
            let mut setup = matrix.setup.clone();
            setup.agents.byzantine = byzantine;
            let name = slug(&format!("{}_{}_{}", matrix.name, method, attack.unwrap_or("none")));
            MatrixCell {
                method: method.to_string(),
                attack: attack.map(str::to_string),
                config: ExperimentConfig {
                    schema_version: SCHEMA_VERSION,
                    name,
                    output_dir: None,
                    export_traces: false,
                    rule: rule.clone(),
                    attack: model.clone(),
                    setup,
                },
            }
        };
        let mut cells = Vec::new();
        for a in &matrix.attacks {
            for m in &matrix.methods {
                cells.push(cell(&m.label, Some(&a.label), &m.rule, &a.attack, matrix.setup.agents.byzantine.clone()));
            }
        }
        let reference = matrix
            .reference
            .then(|| cell(REFERENCE_LABEL, None, &AggregationRule::fedavg(), &AttackModel::none(), Vec::new()));
        let plan = Self {
            name: matrix.name.clone(),
            hash: matrix.hash(),
            methods: matrix.methods.iter().map(|m| m.label.clone()).collect(),
            attacks: matrix.attacks.iter().map(|a| a.label.clone()).collect(),
            cells,
            reference,
        };
        plan.check_shared()?;
        Ok(plan)
    }

    /// Builds a plan from independently written experiment configs.
    pub fn from_cells(name: &str, cells: Vec<MatrixCell>, reference: Option<MatrixCell>) -> Result<Self> {
        let mut methods: Vec<String> = Vec::new();
        let mut attacks: Vec<String> = Vec::new();
        for c in &cells {
            let Some(attack) = &c.attack else {
                return Err(ExpError::Config(format!("cell {:?} has no attack label", c.method)));
            };
            if !methods.contains(&c.method) {
                methods.push(c.method.clone());
            }
            if !attacks.contains(attack) {
                attacks.push(attack.clone());
            }
        }
        let keys: Vec<_> = cells.iter().map(|c| (&c.method, &c.attack, c.config.hash())).collect();
        let plan = Self {
            name: name.to_string(),
            hash: canonical_hash(&(name, keys, reference.as_ref().map(|r| r.config.hash()))),
            methods,
            attacks,
            cells,
            reference,
        };
        plan.check_shared()?;
        Ok(plan)
    }

    fn all_cells(&self) -> impl Iterator<Item = &MatrixCell> {
        self.cells.iter().chain(self.reference.iter())
    }

    fn check_shared(&self) -> Result<()> {
        let mut it = self.all_cells();
        let Some(first) = it.next() else {
            return Err(ExpError::Config("matrix has no cells".into()));
        };
        let base: &Setup = &first.config.setup;
        for c in it {
            let s = &c.config.setup;
            if s.environment != base.environment {
                return Err(ExpError::MismatchedEnvironment(format!(
                    "{:?}/{:?} differs from {:?}/{:?}",
                    c.method, c.attack, first.method, first.attack
                )));
            }
            if s.horizon != base.horizon || s.seeds != base.seeds {
                return Err(ExpError::Config("matrix cells must share horizon and seeds".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub attack: Option<String>,
    pub config_hash: String,
    pub final_msbe: f64,
    pub final_ce: f64,
    /// Per-seed `(final MSBE, final CE)`.
    pub per_seed: Vec<(u64, f64, f64)>,
    #[serde(skip)]
    pub mean_msbe: Vec<f64>,
    #[serde(skip)]
    pub mean_ce: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixManifest {
    pub schema_version: u32,
    pub csv_version: u32,
    pub name: String,
    pub matrix_hash: String,
    pub seeds: Vec<u64>,
    pub horizon: usize,
    pub cells: Vec<CellResult>,
    pub reference: Option<CellResult>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub dir: PathBuf,
    pub manifest: MatrixManifest,
}

impl MatrixOutcome {
    pub fn cell(&self, method: &str, attack: &str) -> Option<&CellResult> {
        self.manifest.cells.iter().find(|c| c.method == method && c.attack.as_deref() == Some(attack))
    }

    pub fn reference(&self) -> Option<&CellResult> {
        self.manifest.reference.as_ref()
    }
}

/// Runs every cell and seed on a shared worker pool and writes a fresh directory.
pub fn run_matrix(plan: &MatrixPlan, root: &Path) -> Result<MatrixOutcome> {
    plan.check_shared()?;
    let cells: Vec<&MatrixCell> = plan.all_cells().collect();
    let prepared = cells
        .iter()
        .map(|c| {
            c.config.validate()?;
            c.config.setup.prepare()
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("{}: {} cells", plan.name, cells.len());
    let results: Vec<CellResult> = cells
        .par_iter()
        .zip(prepared.par_iter())
        .map(|(cell, prep)| {
            let c = &cell.config;
            let traces = run_seeds(&c.setup, prep, &c.rule, &c.attack, &c.setup.agents.byzantine, false)?;
            let h = c.setup.horizon;
            let per_seed = traces
                .iter()
                .map(|t| Ok((t.seed, t.msbe(h)?, t.ce(h).unwrap_or(0.0))))
                .collect::<Result<Vec<_>>>()?;
            let mean_msbe = output::mean_series(&traces.iter().map(|t| t.msbe_series()).collect::<Vec<_>>());
            let mean_ce = output::mean_series(&traces.iter().map(|t| t.ce_series()).collect::<Vec<_>>());
            Ok(CellResult {
                method: cell.method.clone(),
                attack: cell.attack.clone(),
                config_hash: c.hash(),
                final_msbe: *mean_msbe.last().unwrap_or(&0.0),
                final_ce: *mean_ce.last().unwrap_or(&0.0),
                per_seed,
                mean_msbe,
                mean_ce,
            })
        })
        .collect::<Result<_>>()?;
    let (cells_out, reference) = if plan.reference.is_some() {
        let mut r = results;
        let reference = r.pop();
        (r, reference)
    } else {
        (results, None)
    };

    let dir = output::fresh_run_dir(root, &plan.name, &plan.hash)?;
    let mut files = Vec::new();
    let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
    summary.write_record(["method", "attack", "final_msbe", "final_ce"])?;
    for c in cells_out.iter().chain(reference.iter()) {
        summary.write_record([
            c.method.as_str(),
            c.attack.as_deref().unwrap_or(""),
            &output::fmt(c.final_msbe),
            &output::fmt(c.final_ce),
        ])?;
    }
    summary.flush().map_err(crate::error::io_err(dir.join("summary.csv")))?;
    files.push("summary.csv".to_string());

    let groups: Vec<(String, String)> = if plan.attacks.is_empty() {
        vec![("reference".into(), "no attack".into())]
    } else {
        plan.attacks.iter().map(|a| (slug(a), format!("{a} attack"))).collect()
    };
    for (group_slug, group_title) in &groups {
        let mut lines: Vec<&CellResult> = if plan.attacks.is_empty() {
            Vec::new()
        } else {
            cells_out
                .iter()
                .filter(|c| c.attack.as_deref().map(slug).as_deref() == Some(group_slug.as_str()))
                .collect()
        };
        lines.extend(reference.iter());
        let labels: Vec<&str> = lines.iter().map(|c| c.method.as_str()).collect();
        for (metric, title, pick) in [
            ("msbe", "MSBE", (|c: &CellResult| c.mean_msbe.as_slice()) as fn(&CellResult) -> &[f64]),
            ("ce", "CE", |c: &CellResult| c.mean_ce.as_slice()),
        ] {
            let name = format!("{metric}_{group_slug}.csv");
            let csv = dir.join(&name);
            let series: Vec<&[f64]> = lines.iter().map(|c| pick(c)).collect();
            output::write_series_csv(&csv, &labels, &series)?;
            let svg = chart_from_csv(&csv, &format!("{title}, {group_title}"), title, Scale::Log)?;
            files.push(name);
            files.push(svg.file_name().unwrap().to_string_lossy().into_owned());
        }
    }

    let base = &plan.all_cells().next().expect("checked non-empty").config.setup;
    let manifest = MatrixManifest {
        schema_version: SCHEMA_VERSION,
        csv_version: CSV_VERSION,
        name: plan.name.clone(),
        matrix_hash: plan.hash.clone(),
        seeds: base.seeds.clone(),
        horizon: base.horizon,
        cells: cells_out,
        reference,
        files,
    };
    output::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(MatrixOutcome { dir, manifest })
}
