use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use rbl_core::gabp::NoiseMode;
use rbl_core::harness::validate::run_validation;
use rbl_core::harness::{
    emit_report, parse_csv, plot_script, Estimator, ExperimentConfig, NormSource, RmseReport,
    PLOT_FILE,
};
use rbl_core::scenario::Scenario;
use rbl_core::{RblError, Result};

#[derive(Parser)]
#[command(
    name = "rbl",
    version,
    about = "Rigid body localization Monte-Carlo experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    True,
    Estimated,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    PerRow,
    Scalar,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a seeded sweep and write rmse.csv plus a plot script.
    Run {
        /// Scenario TOML; the built-in unit-cube scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Comma-separated σ_w values in meters; defaults to the scenario sweep.
        #[arg(long, value_delimiter = ',')]
        sigma: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated subset of double-gabp, stage-a-gabp, ls-procrustes, genie.
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
        #[arg(long, value_enum, default_value = "estimated")]
        norm_source: NormArg,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        lambda_max: Option<usize>,
        #[arg(long, value_enum)]
        noise_mode: Option<NoiseArg>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run the invariant checks on a scenario.
    Validate {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-render the plot script from an existing rmse.csv.
    Report {
        /// Path to rmse.csv.
        csv: PathBuf,
        /// Output directory; defaults to the CSV's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also execute the script with python3.
        #[arg(long)]
        render: bool,
    },
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    match path {
        Some(p) => Scenario::from_file(p),
        None => Ok(Scenario::unit_cube()),
    }
}

fn print_summary(report: &RmseReport) {
    println!(
        "{:<14} {:<12} {:>10} {:>14} {:>8} {:>9}",
        "estimator", "block", "sigma", "rmse", "trials", "failures"
    );
    for r in &report.rows {
        println!(
            "{:<14} {:<12} {:>10} {:>14.6e} {:>8} {:>9}",
            r.estimator, r.block, r.sigma, r.rmse, r.trials, r.failures
        );
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run {
            scenario,
            sigma,
            trials,
            seed,
            estimators,
            norm_source,
            rho,
            lambda_max,
            noise_mode,
            out,
        } => {
            let mut cfg = ExperimentConfig::new(load_scenario(scenario.as_deref())?);
            if let Some(s) = sigma {
                cfg.sigmas = s;
            }
            cfg.trials = trials;
            cfg.seed = seed;
            if let Some(list) = estimators {
                cfg.estimators = list
                    .iter()
                    .map(|s| s.parse())
                    .collect::<Result<Vec<Estimator>>>()?;
            }
            cfg.norm_source = match norm_source {
                NormArg::True => NormSource::True,
                NormArg::Estimated => NormSource::Estimated,
            };
            if let Some(r) = rho {
                cfg.gabp.rho = r;
            }
            if let Some(l) = lambda_max {
                cfg.gabp.lambda_max = l;
            }
            if let Some(m) = noise_mode {
                cfg.gabp.noise_mode = match m {
                    NoiseArg::PerRow => NoiseMode::PerRow,
                    NoiseArg::Scalar => NoiseMode::Scalar,
                };
            }
            let report = rbl_core::harness::run_monte_carlo(&cfg)?;
            let paths = emit_report(&report, &out)?;
            print_summary(&report);
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Cmd::Validate { scenario, seed } => {
            let sc = load_scenario(scenario.as_deref())?;
            let checks = run_validation(&sc, seed);
            let mut failed = Vec::new();
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                if !c.passed {
                    failed.push(c.name);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(RblError::InvalidParameter {
                    name: "validation",
                    reason: format!("failed checks: {}", failed.join(", ")),
                })
            }
        }
        Cmd::Report { csv, out, render } => {
            let text = std::fs::read_to_string(&csv).map_err(|e| RblError::Io {
                path: csv.clone(),
                source: e,
            })?;
            let report = parse_csv(&text)?;
            let dir =
                out.unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
            std::fs::create_dir_all(&dir).map_err(|e| RblError::Io {
                path: dir.clone(),
                source: e,
            })?;
            // The script reads the CSV from its own directory.
            let csv_name = csv
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("rmse.csv");
            if dir.join(csv_name) != csv {
                std::fs::write(dir.join(csv_name), &text).map_err(|e| RblError::Io {
                    path: dir.join(csv_name),
                    source: e,
                })?;
            }
            let script = dir.join(PLOT_FILE);
            std::fs::write(&script, plot_script(csv_name)).map_err(|e| RblError::Io {
                path: script.clone(),
                source: e,
            })?;
            print_summary(&report);
            println!("wrote {}", script.display());
            if render {
                let status =
                    Command::new("python3")
                        .arg(&script)
                        .status()
                        .map_err(|e| RblError::Io {
                            path: script.clone(),
                            source: e,
                        })?;
                if !status.success() {
                    return Err(RblError::InvalidParameter {
                        name: "render",
                        reason: format!("python3 exited with {status}"),
                    });
                }
            }
            Ok(())
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().to_string()),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
