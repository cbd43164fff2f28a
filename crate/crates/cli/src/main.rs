use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrlab::lab::{self, verify, Config, Experiment, Report};
use mrlab::Error;

/// Off-manifold robustness laboratory.
#[derive(Parser)]
#[command(name = "mrlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Source {
    /// TOML config with [world], [model], [objective], [schedule], [grid], [metrics], [regimes].
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment preset (fig2-desk, mnist-distractor).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replaces the grid seeds with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for training.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.csv and test.csv of the configured world.
    GenData(Source),
    /// Train (or reload) every run of the sweep and cache the models.
    Train(Source),
    /// Train, measure and write report.csv, report.json and gradients.csv.
    Sweep(Source),
    /// Measure previously trained models and write the report files.
    Measure(Source),
    /// Run a verification suite (prop1, prop2, denoiser, linear, gradcheck or all).
    Verify {
        suite: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Summarise an existing report and check its regime labels.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

enum Failure {
    Validation(String),
    Verification,
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::EmptySweep
            | Error::ShapeMismatch { .. }
            | Error::InvalidClass { .. } => Failure::Validation(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load_config(src: &Source) -> Result<Config, Failure> {
    let cfg = match (&src.config, &src.preset) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(name)) => Config::preset(name)?,
        (None, None) => {
            return Err(Failure::Validation(
                "one of --config or --preset is required".into(),
            ))
        }
    };
    Ok(match src.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_rows(report: &Report) {
    println!(
        "{:<12} {:>10} {:>5} {:>8} {:>11} {:>11} {:>8} {:>8} {:>8}  regime",
        "objective", "param", "seed", "acc", "s_on", "s_off", "rho1", "rho2", "cos"
    );
    for r in &report.rows {
        println!(
            "{:<12} {:>10} {:>5} {:>8} {:>11} {:>11} {:>8} {:>8} {:>8}  {}",
            r.objective,
            r.param,
            r.seed,
            fmt_opt(r.test_acc),
            r.s_on.map_or_else(|| "-".into(), |x| format!("{x:.4e}")),
            r.s_off.map_or_else(|| "-".into(), |x| format!("{x:.4e}")),
            fmt_opt(r.rho1),
            fmt_opt(r.rho2),
            fmt_opt(r.oracle_cos),
            r.regime.map_or_else(|| "-".into(), |g| g.to_string())
        );
    }
}

fn report_failures(report: &Report) -> Result<(), Failure> {
    let failed: Vec<_> = report.runs.iter().filter(|r| r.status != "ok").collect();
    for r in &failed {
        eprintln!(
            "run {} ({} {} seed {}) failed: {}",
            r.index,
            r.objective.name(),
            r.objective.param(),
            r.seed,
            r.status
        );
    }
    if !report.runs.is_empty() && failed.len() == report.runs.len() {
        return Err(Failure::Run("every run failed".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(src) => {
            let mut cfg = load_config(&src)?;
            if let Some(s) = src.seed {
                cfg.world.train_seed = s;
                cfg.world.test_seed = s.wrapping_add(1);
            }
            let (n_train, n_test) = lab::gen_data(&cfg, &src.out)?;
            println!(
                "wrote {n_train} training and {n_test} test points to {}",
                src.out.display()
            );
        }
        Command::Train(src) => {
            let cfg = load_config(&src)?;
            let exp = Experiment::prepare(&cfg)?;
            let outcomes = lab::train_runs(&exp, &src.out, src.jobs, false)?;
            let mut failed = 0;
            for o in &outcomes {
                match &o.result {
                    Ok((_, h)) => println!(
                        "run {:>3} {:<12} {:>10} seed {:>3}  acc {:.4}",
                        o.spec.index,
                        o.spec.objective.name(),
                        o.spec.param(),
                        o.spec.seed,
                        h.final_accuracy()
                    ),
                    Err(e) => {
                        failed += 1;
                        eprintln!("run {} failed: {e}", o.spec.index);
                    }
                }
            }
            if failed == outcomes.len() {
                return Err(Failure::Run("every run failed".into()));
            }
        }
        Command::Sweep(src) => {
            let cfg = load_config(&src)?;
            let report = lab::run_experiment(&cfg, &src.out, src.jobs, src.preset.as_deref())?;
            print_rows(&report);
            report_failures(&report)?;
        }
        Command::Measure(src) => {
            let cfg = load_config(&src)?;
            let exp = Experiment::prepare(&cfg)?;
            let outcomes = lab::train_runs(&exp, &src.out, src.jobs, true)
                .map_err(|e| Failure::Run(e.to_string()))?;
            let report = lab::measure(&exp, &outcomes, src.preset.as_deref())?;
            report.write(&src.out)?;
            print_rows(&report);
            report_failures(&report)?;
        }
        Command::Verify { suite, seed } => {
            let suites: Vec<&str> = if suite == "all" {
                verify::SUITES.to_vec()
            } else {
                vec![suite.as_str()]
            };
            let mut ok = true;
            for s in suites {
                let checks = verify::verify(s, seed)?;
                for c in &checks {
                    println!("{c}");
                }
                ok &= verify::all_passed(&checks);
            }
            if !ok {
                return Err(Failure::Verification);
            }
        }
        Command::Report { out } => {
            let report = Report::read(&out)?;
            report
                .check_consistency()
                .map_err(|e| Failure::Validation(e.to_string()))?;
            print_rows(&report);
            println!(
                "config {}  max accuracy {}",
                &report.config_hash[..16],
                fmt_opt(report.max_accuracy)
            );
            for regime in [
                lab::Regime::Weak,
                lab::Regime::BayesAligned,
                lab::Regime::Excessive,
            ] {
                let n = report
                    .rows
                    .iter()
                    .filter(|r| r.regime == Some(regime))
                    .count();
                println!("{regime}: {n} runs");
            }
            if let Some(best) = report.best_cosine() {
                println!(
                    "best oracle cosine {:.4}: {} {} seed {}",
                    best.oracle_cos.unwrap_or(f64::NAN),
                    best.objective,
                    best.param,
                    best.seed
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Verification) => {
            eprintln!("verification failed");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
