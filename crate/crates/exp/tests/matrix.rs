use std::fs;
use std::path::Path;

use bdtd_exp::config::EnvironmentSpec;
use bdtd_exp::matrix::{MatrixCell, REFERENCE_LABEL};
use bdtd_exp::plot::ChartData;
use bdtd_exp::{run_matrix, ExpError, MatrixConfig, MatrixPlan};

const MATRIX: &str = r#"
schema_version = 1
name = "tiny"

[setup]
horizon = 40
seeds = [0, 1, 2]

[setup.environment]
kind = "grid_spread"
grid_size = 3
num_agents = 4
num_landmarks = 2
seed = 5

[setup.agents]
n = 4
f = 1
byzantine = [3]

[setup.features]
kind = "hashed"
dim = 6
seed = 2

[setup.schedule]
kind = "constant"
eta = 0.1

[[methods]]
label = "BDTD"
rule = { kind = "trimmed_mean" }

[[methods]]
label = "FedAvg"
rule = { kind = "fedavg" }

[[attacks]]
label = "Gaussian"
attack = { kind = "gaussian" }

[[attacks]]
label = "Trim"
attack = { kind = "trim_attack" }
"#;

fn plan(text: &str) -> MatrixPlan {
    let config = MatrixConfig::from_toml_str(text, Path::new("tiny.toml")).unwrap();
    MatrixPlan::from_config(&config).unwrap()
}

#[test]
fn one_chart_per_attack_and_metric_with_reference_line() {
    let tmp = tempfile::tempdir().unwrap();
    let outcome = run_matrix(&plan(MATRIX), tmp.path()).unwrap();
    for attack in ["gaussian", "trim"] {
        for metric in ["msbe", "ce"] {
            let csv = outcome.dir.join(format!("{metric}_{attack}.csv"));
            assert!(csv.with_extension("svg").exists());
            let data = ChartData::from_csv(&csv).unwrap();
            let labels: Vec<&str> = data.series.iter().map(|(l, _)| l.as_str()).collect();
            assert_eq!(labels, ["BDTD", "FedAvg", REFERENCE_LABEL]);
            assert_eq!(data.rounds.len(), 40);
        }
    }
    assert_eq!(outcome.manifest.cells.len(), 4);
    let summary = fs::read_to_string(outcome.dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4 + 1);
}

#[test]
fn chart_csv_matches_the_cell_series() {
    let tmp = tempfile::tempdir().unwrap();
    let outcome = run_matrix(&plan(MATRIX), tmp.path()).unwrap();
    let data = ChartData::from_csv(&outcome.dir.join("msbe_trim.csv")).unwrap();
    let bdtd = outcome.cell("BDTD", "Trim").unwrap();
    assert_eq!(data.series[0].1, bdtd.mean_msbe);
    assert_eq!(*data.series[0].1.last().unwrap(), bdtd.final_msbe);
    let reference = outcome.reference().unwrap();
    assert_eq!(data.series[2].1, reference.mean_msbe);
    let mean_of_seeds = bdtd.per_seed.iter().map(|s| s.1).sum::<f64>() / 3.0;
    assert!((mean_of_seeds - bdtd.final_msbe).abs() <= 1e-12 * bdtd.final_msbe.max(1.0));
}

#[test]
fn reference_is_the_same_across_attacks_and_unaffected_by_them() {
    let tmp = tempfile::tempdir().unwrap();
    let outcome = run_matrix(&plan(MATRIX), tmp.path()).unwrap();
    let g = ChartData::from_csv(&outcome.dir.join("ce_gaussian.csv")).unwrap();
    let t = ChartData::from_csv(&outcome.dir.join("ce_trim.csv")).unwrap();
    assert_eq!(g.series[2], t.series[2]);
}

#[test]
fn empty_attack_list_gives_reference_only_charts() {
    let text = MATRIX.split("[[attacks]]").next().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let outcome = run_matrix(&plan(text), tmp.path()).unwrap();
    assert!(outcome.manifest.cells.is_empty());
    for metric in ["msbe", "ce"] {
        let data = ChartData::from_csv(&outcome.dir.join(format!("{metric}_reference.csv"))).unwrap();
        assert_eq!(data.series.len(), 1);
        assert_eq!(data.series[0].0, REFERENCE_LABEL);
        assert!(outcome.dir.join(format!("{metric}_reference.svg")).exists());
    }
}

#[test]
fn mismatched_environments_are_rejected() {
    let p = plan(MATRIX);
    let mut cells: Vec<MatrixCell> = p.cells.clone();
    if let EnvironmentSpec::GridSpread(g) = &mut cells[1].config.setup.environment {
        g.seed += 1;
    }
    let err = MatrixPlan::from_cells("mixed", cells, None).unwrap_err();
    assert!(matches!(err, ExpError::MismatchedEnvironment(_)));
    assert_eq!(err.exit_code(), 2);
    let same = MatrixPlan::from_cells("same", p.cells.clone(), p.reference.clone()).unwrap();
    assert_eq!(same.methods, ["BDTD", "FedAvg"]);
    assert_eq!(same.attacks, ["Gaussian", "Trim"]);
}

#[test]
fn matrix_config_validation() {
    let dup = MATRIX.replace("label = \"FedAvg\"", "label = \"BDTD\"");
    assert!(MatrixConfig::from_toml_str(&dup, Path::new("x")).is_err());
    let typo = MATRIX.replace("rule = { kind = \"fedavg\" }", "rule = { kind = \"fedavg\", weight = 1 }");
    assert!(MatrixConfig::from_toml_str(&typo, Path::new("x")).is_err());
    let nothing = MATRIX
        .split("[[methods]]")
        .next()
        .unwrap()
        .replace("name = \"tiny\"", "name = \"tiny\"\nreference = false");
    assert!(MatrixConfig::from_toml_str(&nothing, Path::new("x")).is_err());
}
