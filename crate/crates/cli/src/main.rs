//! `ftest-sim`: size, power and exact-oracle experiments for the F-test in
//! misspecified linear submodels.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ftest_core::dgp::DesignDistribution;

use config::{resolve, CommonArgs, Defaults, OracleArgs};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Core(ftest_core::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Io(msg) => write!(f, "i/o error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<ftest_core::Error> for CliError {
    fn from(e: ftest_core::Error) -> Self {
        match e {
            ftest_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            _ => ExitCode::FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ftest-sim", version, about = "Size and power of the F-test under misspecified random designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mean absolute size deviation D̄ over the (design, d, p) grid.
    Table1(CommonArgs),
    /// Per-rotation rejection rates at a single p (default p = 5, d in 10,50,100,1000).
    Boxplots(CommonArgs),
    /// Binomial(reps, a)/reps reference draws for a in 0.05, 0.1, 0.15, 0.2.
    Benchmark(CommonArgs),
    /// KS distance to the noncentral F and rejection rate versus the normal approximation.
    Theorem1(CommonArgs),
    /// Rejection rate against the noncentral-F and normal power curves.
    Power(CommonArgs),
    /// Exact enumeration checks: tail probe, risk ratio and substitute-error gap.
    Oracle {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        oracle: OracleArgs,
    },
    /// Re-run one cell recorded in a table1 or boxplots output directory.
    Verify {
        #[arg(long, value_name = "DIR", default_value = "out")]
        out_dir: PathBuf,
        /// Index into the manifest's cell list (random when omitted).
        #[arg(long)]
        cell: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    use DesignDistribution::*;
    let none = OracleArgs::default();
    let resolved = |common: &CommonArgs, oracle: &OracleArgs, defaults: Defaults| {
        let res = resolve(common, oracle, defaults)?;
        // Oracle routines use the global pool; experiments build their own.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(res.run.threads)
            .build_global();
        Ok::<_, CliError>(res)
    };
    match cli.command {
        Command::Table1(common) => commands::table1(&resolved(&common, &none, Defaults::default())?)?,
        Command::Boxplots(common) => {
            let defaults = Defaults {
                dims: Some(vec![10, 50, 100, 1000]),
                p_dims: Some(vec![5]),
                ..Default::default()
            };
            commands::boxplots(&resolved(&common, &none, defaults)?)?
        }
        Command::Benchmark(common) => commands::benchmark(&resolved(&common, &none, Defaults::default())?)?,
        Command::Theorem1(common) => {
            let defaults = Defaults {
                dims: Some(vec![10, 50, 200]),
                p_dims: Some(vec![5]),
                designs: Some(vec![Gaussian, ExponentialCentered]),
                ..Default::default()
            };
            commands::theorem1(&resolved(&common, &none, defaults)?)?
        }
        Command::Power(common) => {
            let defaults = Defaults {
                dims: Some(vec![50]),
                p_dims: Some(vec![5, 25]),
                designs: Some(vec![Gaussian]),
                snr_scaled: Some((0..=10).map(|i| f64::from(i) / 10.0).collect()),
                ..Default::default()
            };
            commands::power(&resolved(&common, &none, defaults)?)?
        }
        Command::Oracle { common, oracle } => {
            let defaults = Defaults {
                dims: Some(vec![8, 12, 16, 20]),
                p_dims: Some(vec![2]),
                designs: Some(vec![Rademacher]),
                noise_sd: Some(1.0),
                ..Default::default()
            };
            commands::oracle(&resolved(&common, &oracle, defaults)?)?
        }
        Command::Verify {
            out_dir,
            cell,
            seed,
            threads,
        } => return commands::verify(&out_dir, cell, seed, threads),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("ftest-sim: {e}");
            e.exit_code()
        }
    }
}
