use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use multikarma::equilibrium::SolverSettings;
use multikarma::mean_field::SocialState;
use multikarma::model::{validate_config, EconomyConfig};
use multikarma::montecarlo::{run_simulation, SimulationSettings};
use multikarma::scenario::{
    cell_report, export, run_matrix, Cell, CellOutcome, CellResult, Exchange, ResultBundle, ScenarioMatrix,
};
use multikarma::welfare::benchmark_payoffs;
use multikarma::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "multikarma", version, about = "Equilibria of coupled multi-resource karma economies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration and list every violation.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Solve one configuration.
    Solve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Run the redistribution x exchange design matrix.
    Matrix {
        /// Base economy; the built-in two-resource commute example by default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// A full matrix description (base, cells, settings) in JSON.
        #[arg(long, conflicts_with = "config")]
        matrix: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Simulate a finite population under a solved policy.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Social state written by `solve` (social.json).
        #[arg(long)]
        social: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        agents: usize,
        #[arg(long, default_value_t = 10_000)]
        days: usize,
        #[arg(long, default_value_t = 1_000)]
        burn_in: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Closed-form payoffs under uncontrolled access.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SolverArgs {
    /// Solver settings in JSON; flags below override individual fields.
    #[arg(long)]
    settings: Option<PathBuf>,
    #[arg(long)]
    tol_q: Option<f64>,
    #[arg(long)]
    tol_d: Option<f64>,
    #[arg(long)]
    tol_pi: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    lambda_min: Option<f64>,
}

impl SolverArgs {
    fn resolve(&self, base: SolverSettings) -> Result<SolverSettings, Error> {
        let mut s = match &self.settings {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)?
            }
            None => base,
        };
        if let Some(v) = self.tol_q {
            s.tol_q_relative = v;
        }
        if let Some(v) = self.tol_d {
            s.tol_stationarity = v;
        }
        if let Some(v) = self.tol_pi {
            s.tol_policy = v;
        }
        if let Some(v) = self.max_outer {
            s.max_outer = v;
        }
        if let Some(v) = self.step {
            s.step_size = v;
        }
        if let Some(v) = self.lambda_min {
            s.lambda_min = v;
        }
        s.validate()?;
        Ok(s)
    }
}

fn load_config(path: Option<&Path>) -> Result<EconomyConfig, Error> {
    match path {
        Some(p) => EconomyConfig::load(p),
        None => Ok(EconomyConfig::case_study()),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = load_config(config.as_deref())?;
            let report = validate_config(&cfg);
            if report.is_valid() {
                println!("valid");
                Ok(0)
            } else {
                for v in &report.violations {
                    println!("violation: {v}");
                }
                Ok(EXIT_INVALID)
            }
        }
        Command::Solve { config, out, solver } => {
            let cfg = load_config(config.as_deref())?;
            validate_config(&cfg).into_result()?;
            let settings = solver.resolve(SolverSettings::default())?;
            let report = multikarma::equilibrium::solve_sne(&cfg, &settings, None)?;
            write(&out.join("social.json"), &serde_json::to_string(&report.social)?)?;
            let cell = CellResult {
                cell: Cell {
                    redistribution: cfg.redistribution,
                    exchange: Exchange::Custom(cfg.exchange.clone()),
                    label: format!("{:?}", cfg.exchange.regime()),
                },
                outcome: CellOutcome::Solved(Box::new(cell_report(&cfg, &settings, report)?)),
            };
            let bundle = ResultBundle {
                types: cfg.types.iter().map(|t| t.name.clone()).collect(),
                benchmark: Some(benchmark_payoffs(&cfg)),
                cells: vec![cell],
            };
            export(&bundle, &out)?;
            let converged = bundle.all_converged();
            print_summary(&bundle);
            Ok(if converged { 0 } else { EXIT_NOT_CONVERGED })
        }
        Command::Matrix { config, matrix, out, solver } => {
            let mut m = match matrix {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str::<ScenarioMatrix>(&text)?
                }
                None => ScenarioMatrix::standard(load_config(config.as_deref())?),
            };
            m.settings = solver.resolve(m.settings.clone())?;
            let bundle = run_matrix(&m);
            export(&bundle, &out)?;
            print_summary(&bundle);
            Ok(if bundle.any_failed() {
                EXIT_INVALID
            } else if !bundle.all_converged() {
                EXIT_NOT_CONVERGED
            } else {
                0
            })
        }
        Command::Simulate {
            config,
            social,
            agents,
            days,
            burn_in,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            validate_config(&cfg).into_result()?;
            let text = std::fs::read_to_string(&social).map_err(|e| Error::io(&social, e))?;
            let social: SocialState = serde_json::from_str(&text)?;
            let settings = SimulationSettings {
                agents,
                days,
                burn_in,
                seed,
                record_daily: true,
                ..SimulationSettings::default()
            };
            let stats = run_simulation(&cfg, &social, &settings)?;
            write(&out.join("daily.csv"), &stats.daily_csv())?;
            let mut summary = stats.clone();
            summary.daily.clear();
            write(&out.join("simulation.json"), &serde_json::to_string_pretty(&summary)?)?;
            for (t, (en, ex)) in cfg
                .types
                .iter()
                .zip(stats.payoff_endogenous.iter().zip(&stats.payoff_exogenous))
            {
                println!(
                    "{}: endogenous {:.4} (se {:.4}), exogenous {:.4} (se {:.4})",
                    t.name, en.mean, en.std_error, ex.mean, ex.std_error
                );
            }
            println!("saturation events {}, lost karma {}", stats.saturation_events, stats.karma_lost);
            Ok(0)
        }
        Command::Bench { config } => {
            let cfg = load_config(config.as_deref())?;
            let b = benchmark_payoffs(&cfg);
            for (res, d) in cfg.resources.iter().zip(&b.delays) {
                println!("delay {}: {:.4}", res.name, d);
            }
            for (i, t) in cfg.types.iter().enumerate() {
                println!(
                    "{}: endogenous {:.4}, exogenous {:.4}",
                    t.name, b.endogenous[i], b.exogenous[i]
                );
            }
            Ok(0)
        }
    }
}

fn print_summary(bundle: &ResultBundle) {
    for c in &bundle.cells {
        match &c.outcome {
            CellOutcome::Solved(r) => println!(
                "{} / {}: converged={} iterations={} q_gap={:.2e} stationarity={:.2e} sw_en={} sw_ex={}",
                c.cell.redistribution,
                c.cell.label,
                r.converged,
                r.iterations,
                r.certificate.q_gap,
                r.certificate.stationarity,
                r.welfare.social_endogenous.map_or("--".into(), |v| format!("{v:.4}")),
                r.welfare.social_exogenous.map_or("--".into(), |v| format!("{v:.4}")),
            ),
            CellOutcome::Failed { error } => println!("{} / {}: failed: {error}", c.cell.redistribution, c.cell.label),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e @ Error::InvalidConfig(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
