use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bdtd_core::verify::{run_suite, SUITES};
use bdtd_exp::output::OUTPUT_ROOT_ENV;
use bdtd_exp::plot::{chart_from_csv, ChartData, Scale};
use bdtd_exp::{run_experiment, run_matrix, ExpError, ExperimentConfig, MatrixConfig, MatrixPlan};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bdtd", version, about = "Byzantine-tolerant decentralized TD learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config over all of its seeds.
    Run {
        config: PathBuf,
        /// Results root; falls back to the config's output_dir, then ./results.
        #[arg(long, env = OUTPUT_ROOT_ENV)]
        output: Option<PathBuf>,
        /// Also write per-agent parameter traces.
        #[arg(long)]
        traces: bool,
    },
    /// Run a methods x attacks matrix and draw the comparison charts.
    Matrix {
        config: PathBuf,
        #[arg(long, env = OUTPUT_ROOT_ENV)]
        output: Option<PathBuf>,
    },
    /// Run a randomized or analytic check suite (or `all`).
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw an SVG chart from a series CSV.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long, default_value = "value")]
        y_label: String,
        #[arg(long)]
        linear: bool,
    },
}

fn output_root(flag: Option<PathBuf>, from_config: Option<&Path>) -> PathBuf {
    flag.or_else(|| from_config.map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from("results"))
}

fn verify(suite: &str, seed: u64) -> Result<bool, ExpError> {
    let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite] };
    let mut all_pass = true;
    for name in names {
        let started = std::time::Instant::now();
        let report = run_suite(name, seed)?;
        let status = if report.pass() { "PASS" } else { "FAIL" };
        println!(
            "{status} {name}: {} trials, {} violations ({:.1?})",
            report.trials,
            report.violations,
            started.elapsed()
        );
        for note in &report.notes {
            println!("  note: {note}");
        }
        for v in &report.examples {
            println!("  violation: {v}");
        }
        all_pass &= report.pass();
    }
    Ok(all_pass)
}

fn dispatch(cli: Cli) -> Result<bool, ExpError> {
    match cli.command {
        Command::Run { config, output, traces } => {
            let mut config = ExperimentConfig::load(&config)?;
            config.export_traces |= traces;
            let root = output_root(output, config.output_dir.as_deref());
            let outcome = run_experiment(&config, &root)?;
            let m = &outcome.manifest;
            println!("{}", outcome.dir.display());
            println!(
                "{} runs, final MSBE {:.6e}, final CE {:.6e}",
                m.contributing_runs, m.mean_final_msbe, m.mean_final_ce
            );
            Ok(true)
        }
        Command::Matrix { config, output } => {
            let config = MatrixConfig::load(&config)?;
            let root = output_root(output, config.output_dir.as_deref());
            let plan = MatrixPlan::from_config(&config)?;
            let outcome = run_matrix(&plan, &root)?;
            println!("{}", outcome.dir.display());
            for c in outcome.manifest.cells.iter().chain(outcome.reference()) {
                println!(
                    "{:<20} {:<10} MSBE {:.6e}  CE {:.6e}",
                    c.method,
                    c.attack.as_deref().unwrap_or("-"),
                    c.final_msbe,
                    c.final_ce
                );
            }
            Ok(true)
        }
        Command::Verify { suite, seed } => verify(&suite, seed),
        Command::Plot { csv, out, title, y_label, linear } => {
            let scale = if linear { Scale::Linear } else { Scale::Log };
            let svg = match out {
                Some(out) => {
                    let data = ChartData::from_csv(&csv)?;
                    bdtd_exp::plot::render_svg(&data, &out, &title, &y_label, scale)?;
                    out
                }
                None => chart_from_csv(&csv, &title, &y_label, scale)?,
            };
            println!("{}", svg.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
