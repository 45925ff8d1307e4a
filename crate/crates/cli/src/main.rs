//! `ramimo`: experiment runner for repeater-assisted massive MIMO.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ramimo_core::channel::RealizationDump;
use ramimo_core::energy::GainLimits;
use ramimo_core::experiments::{self, ExperimentConfig, ExperimentKind};
use ramimo_core::{linear_to_db, mimo, optimizer, sinr_for_se, Error};
use serde::Serialize;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NONCONVERGED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "ramimo", version, about = "Uplink simulator for repeater-assisted massive MIMO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// SINR samples of mMIMO, RA-MIMO with full gains and cell-free MIMO.
    SinrCdf(ExperimentArgs),
    /// SINR after removing the repeaters closest to the base station.
    PruningSweep(ExperimentArgs),
    /// Minimum SINR of cell-edge UEs under max-min amplification control.
    MaxminEdge(ExperimentArgs),
    /// Power consumption and outage of the sleep-control policies.
    EnergyTradeoff(ExperimentArgs),
    /// One-shot optimization of a serialized channel realization.
    Solve(SolveArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config file (TOML or JSON); a manifest.json from an earlier run also works.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override a config key, e.g. `--set drops=10` or `--set scenario.num_ues=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Largest tolerated fraction of optimizer runs that hit their iteration cap.
    #[arg(long, default_value_t = 0.05)]
    max_nonconverged: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Objective {
    Maxmin,
    Minpow,
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// Realization JSON (matrices as row-major `[re, im]` pairs).
    realization: PathBuf,
    #[arg(long, value_enum, default_value_t = Objective::Maxmin)]
    objective: Objective,
    /// Supplies gain limits, optimizer settings and the SE target.
    #[command(flatten)]
    config: ConfigArgs,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SolveReport {
    objective: Objective,
    alpha: Vec<f64>,
    upper: Vec<f64>,
    sinr_db: Vec<f64>,
    min_sinr_db: f64,
    iterations: usize,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    feasible: Option<bool>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self { code: EXIT_CONFIG, message: e.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::NoStabilityCap(_) | Error::GridNotSquare(_) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self { code, message: e.to_string() }
    }
}

fn load_config(args: &ConfigArgs, fallback_preset: &str) -> Result<ExperimentConfig, Failure> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::from_path(path).map_err(Failure::config)?,
        (None, Some(name)) => ExperimentConfig::preset(name).map_err(Failure::config)?,
        (None, None) => ExperimentConfig::preset(fallback_preset).map_err(Failure::config)?,
    };
    for assignment in &args.overrides {
        config.set(assignment).map_err(Failure::config)?;
    }
    Ok(config)
}

fn run_experiment(kind: ExperimentKind, args: &ExperimentArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.config, ExperimentConfig::default_preset(kind))?;
    if config.experiment != kind {
        log::info!("config names experiment `{}`, running `{}`", config.experiment.name(), kind.name());
        config.experiment = kind;
    }
    config.validate().map_err(Failure::config)?;
    if !(0.0..=1.0).contains(&args.max_nonconverged) {
        return Err(Failure::config(format!("--max-nonconverged must be in [0, 1], got {}", args.max_nonconverged)));
    }

    let record = experiments::run(&config)?;
    let files = experiments::emit_csv(&record, &args.out)?;
    let manifest = experiments::emit_manifest(&record, &config, &files, &args.out)?;
    for f in files.iter().chain(std::iter::once(&manifest)) {
        println!("wrote {}", f.display());
    }
    for p in &record.summary {
        println!(
            "{:<24} power {:>9.2} W  min-SE {:>6.3}  outage {:>5.3}  reduction {:>6.2}%",
            p.policy,
            p.mean_power_w,
            p.mean_min_se,
            p.outage_probability,
            100.0 * p.power_reduction
        );
    }

    let rate = record.nonconvergence_rate();
    if record.optimizer_runs > 0 {
        println!("optimizer runs {} (non-converged {:.1}%)", record.optimizer_runs, 100.0 * rate);
    }
    if rate > args.max_nonconverged {
        return Err(Failure {
            code: EXIT_NONCONVERGED,
            message: format!(
                "{} of {} optimizer runs hit the iteration cap ({:.1}% > {:.1}%)",
                record.nonconverged_runs,
                record.optimizer_runs,
                100.0 * rate,
                100.0 * args.max_nonconverged
            ),
        });
    }
    Ok(())
}

fn read_realization(path: &Path) -> Result<RealizationDump, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn solve(args: &SolveArgs) -> Result<(), Failure> {
    let dump = read_realization(&args.realization)?;
    let mut config = load_config(&args.config, ExperimentConfig::default_preset(ExperimentKind::MaxminEdge))?;
    config.scenario.num_bs_antennas = dump.antennas;
    config.scenario.num_repeaters = dump.repeaters;
    config.scenario.num_ues = dump.ues;
    let real = dump.into_realization().map_err(Failure::config)?;
    let limits = GainLimits::from_config(&config.scenario)?;
    let upper = limits.upper(&real, None);
    let settings = config.ccp_settings();

    let (alpha, iterations, converged, feasible) = match args.objective {
        Objective::Maxmin => {
            let out = optimizer::maxmin_ccp(&real, &settings, &upper)?;
            (out.alpha, out.iterations, out.converged, None)
        }
        Objective::Minpow => {
            let thresholds = vec![sinr_for_se(config.se_target); real.num_ues()];
            let out = optimizer::minpow_fpp(&real, &settings, &upper, &thresholds)?;
            (out.alpha, out.iterations, out.converged, Some(out.feasible))
        }
    };
    let sinrs = mimo::lmmse_sinrs(&real, &alpha)?;
    let min = sinrs.iter().copied().fold(f64::INFINITY, f64::min);
    let report = SolveReport {
        objective: args.objective,
        alpha,
        upper,
        sinr_db: sinrs.iter().map(|s| linear_to_db(*s)).collect(),
        min_sinr_db: linear_to_db(min),
        iterations,
        converged,
        feasible,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure { code: EXIT_FAILURE, message: e.to_string() })?;
    match &args.out {
        Some(path) => {
            fs::write(path, json).map_err(|e| Failure { code: EXIT_FAILURE, message: e.to_string() })?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    if !converged {
        return Err(Failure { code: EXIT_NONCONVERGED, message: format!("stopped after {iterations} iterations") });
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SinrCdf(a) => run_experiment(ExperimentKind::SinrCdf, a),
        Command::PruningSweep(a) => run_experiment(ExperimentKind::PruningSweep, a),
        Command::MaxminEdge(a) => run_experiment(ExperimentKind::MaxminEdge, a),
        Command::EnergyTradeoff(a) => run_experiment(ExperimentKind::EnergyTradeoff, a),
        Command::Solve(a) => solve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
