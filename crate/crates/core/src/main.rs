use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use green_cran::consensus::AdmmOptions;
use green_cran::error::Error;
use green_cran::mip_solver::TopologyStrategy;
use green_cran::model::{default_harvest_profile, default_paper_scenario, ScenarioConfig};
use green_cran::runner::{exit_code, parse_grid, solve_instance, sweep_arrival_rates, RunOptions};

#[derive(Parser)]
#[command(name = "green-cran", version, about = "Energy-trading cost minimization for green C-RAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance and write the full report (JSON).
    Solve(Common),
    /// Sweep the per-user arrival rate and write the cost table (CSV).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Arrival-rate grid in Mbit/s, `start:stop:step`.
        #[arg(long, default_value = "1.5:8.5:0.5")]
        lambda_grid: String,
        /// Channel realizations averaged per point.
        #[arg(long, default_value_t = 1)]
        realizations: usize,
    },
    /// Solve one instance and write every ADMM residual trace (CSV).
    Trace(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML, SI units). Defaults to the built-in 7-RRH
    /// scenario with the default harvesting profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the scenario file.
    #[arg(long)]
    seed: Option<u64>,
    /// Initial ADMM penalty.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    outer_tol: Option<f64>,
    #[arg(long)]
    admm_tol_abs: Option<f64>,
    #[arg(long)]
    admm_tol_rel: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    max_admm_iter: Option<usize>,
    /// Use the greedy switch-off heuristic instead of exhaustive topology
    /// search.
    #[arg(long)]
    greedy_topology: bool,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn scenario(&self) -> Result<ScenarioConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => {
                let mut cfg = default_paper_scenario();
                default_harvest_profile(&mut cfg);
                cfg
            }
        };
        if let Some(seed) = self.seed {
            cfg.rng_seed = seed;
        }
        Ok(cfg)
    }

    fn options(&self) -> RunOptions {
        let base = RunOptions::default();
        let admm = AdmmOptions {
            rho: self.rho.unwrap_or(base.admm.rho),
            eps_abs: self.admm_tol_abs.unwrap_or(base.admm.eps_abs),
            eps_rel: self.admm_tol_rel.unwrap_or(base.admm.eps_rel),
            max_iter: self.max_admm_iter.unwrap_or(base.admm.max_iter),
            topology: if self.greedy_topology {
                TopologyStrategy::Greedy
            } else {
                base.admm.topology
            },
            ..base.admm
        };
        RunOptions {
            admm,
            outer_tol: self.outer_tol.unwrap_or(base.outer_tol),
            max_outer: self.max_outer.unwrap_or(base.max_outer),
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn infeasible_document(users: &[usize]) -> String {
    let doc = serde_json::json!({ "status": "infeasible", "users": users });
    format!("{}\n", serde_json::to_string_pretty(&doc).expect("static document"))
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Solve(common) => single(&common, false),
        Command::Trace(common) => single(&common, true),
        Command::Sweep {
            common,
            lambda_grid,
            realizations,
        } => {
            let cfg = common.scenario()?;
            let grid = parse_grid(&lambda_grid)?;
            let table = sweep_arrival_rates(&cfg, &grid, cfg.rng_seed, realizations, &common.options())?;
            emit(common.out.as_deref(), &table.to_csv())?;
            Ok(if table.all_converged() {
                exit_code::SUCCESS
            } else {
                exit_code::NOT_CONVERGED
            })
        }
    }
}

fn single(common: &Common, trace: bool) -> Result<i32, Error> {
    let cfg = common.scenario()?;
    match solve_instance(&cfg, &common.options()) {
        Ok(report) => {
            let text = if trace {
                report.trace_table()
            } else {
                format!("{}\n", report.to_json()?)
            };
            emit(common.out.as_deref(), &text)?;
            Ok(if report.converged {
                exit_code::SUCCESS
            } else {
                exit_code::NOT_CONVERGED
            })
        }
        Err(Error::Infeasible { users }) => {
            emit(common.out.as_deref(), &infeasible_document(&users))?;
            Ok(exit_code::INFEASIBLE)
        }
        Err(e) => Err(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code::FAILURE as u8)
        }
    }
}
