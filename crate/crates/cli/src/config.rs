use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use ftest_core::dgp::{CovarianceSpec, DesignDistribution};
use ftest_core::mc::{default_snr_grid, RunConfig};
use ftest_core::oracle::FrameRecipe;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Flags shared by every experiment; unset flags fall back to the config file,
/// then to the subcommand defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML file with the same keys as the flags (snake_case).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Nominal level of the F-test.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Replications per rotation draw.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Number of rotation draws per cell.
    #[arg(long)]
    pub r_count: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub p_dims: Option<Vec<usize>>,
    /// Design distributions, e.g. `gauss,exp,t3,unif,rademacher`.
    #[arg(long, value_delimiter = ',')]
    pub designs: Option<Vec<DesignDistribution>>,
    /// `spiked`, `spiked:<value>:<count>`, `identity` or `ar1:<rho>`.
    #[arg(long)]
    pub covariance: Option<CovarianceSpec>,
    /// Signal-to-noise ratios (theorem1, power).
    #[arg(long, value_delimiter = ',')]
    pub snr: Option<Vec<f64>>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Independent (Σ, θ) draws per cell.
    #[arg(long)]
    pub sigma_redraws: Option<usize>,
    /// Standard deviation of the true-model error.
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OracleArgs {
    /// Frame construction: `tilted`, `blocks`, `axis` or `rotated`.
    #[arg(long)]
    pub recipe: Option<String>,
    /// Frames per dimension for random recipes.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Deviation thresholds t of the tail probe.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Replications of the F-statistic gap study.
    #[arg(long)]
    pub gap_reps: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum CovarianceSetting {
    Text(String),
    Spec(CovarianceSpec),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    n: Option<usize>,
    #[serde(alias = "level")]
    alpha: Option<f64>,
    reps: Option<usize>,
    r_count: Option<usize>,
    dims: Option<Vec<usize>>,
    p_dims: Option<Vec<usize>>,
    designs: Option<Vec<DesignDistribution>>,
    covariance: Option<CovarianceSetting>,
    snr: Option<Vec<f64>>,
    threads: Option<usize>,
    sigma_redraws: Option<usize>,
    noise_sd: Option<f64>,
    out_dir: Option<PathBuf>,
    format: Option<Format>,
    recipe: Option<String>,
    frames: Option<usize>,
    thresholds: Option<Vec<f64>>,
    gap_reps: Option<usize>,
}

fn load_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Grid defaults that differ between subcommands.
#[derive(Debug, Clone, Default)]
pub struct Defaults {
    pub dims: Option<Vec<usize>>,
    pub p_dims: Option<Vec<usize>>,
    pub designs: Option<Vec<DesignDistribution>>,
    pub noise_sd: Option<f64>,
    /// Signal-to-noise grid as multiples of `1/√n`.
    pub snr_scaled: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub recipe: FrameRecipe,
    pub frames: usize,
    pub thresholds: Vec<f64>,
    pub gap_reps: usize,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub run: RunConfig,
    pub snr: Vec<f64>,
    pub out_dir: PathBuf,
    pub format: Format,
    pub oracle: OracleSettings,
}

pub fn parse_recipe(name: &str, covariance: &CovarianceSpec) -> Result<FrameRecipe, CliError> {
    match name {
        "tilted" => Ok(FrameRecipe::TiltedBlocks),
        "blocks" => Ok(FrameRecipe::EqualBlocks),
        "axis" => Ok(FrameRecipe::AxisAligned),
        "rotated" => Ok(FrameRecipe::RotatedSubmodel {
            covariance: covariance.clone(),
        }),
        other => Err(CliError::Config(format!(
            "unknown recipe `{other}` (expected tilted, blocks, axis or rotated)"
        ))),
    }
}

pub fn resolve(common: &CommonArgs, oracle: &OracleArgs, defaults: Defaults) -> Result<Resolved, CliError> {
    let file = match &common.config {
        Some(path) => load_file(path)?,
        None => FileConfig::default(),
    };
    let base = RunConfig::default();
    let file_cov = match file.covariance {
        Some(CovarianceSetting::Text(s)) => Some(CovarianceSpec::from_str(&s)?),
        Some(CovarianceSetting::Spec(spec)) => Some(spec),
        None => None,
    };
    let run = RunConfig {
        n: common.n.or(file.n).unwrap_or(base.n),
        level: common.alpha.or(file.alpha).unwrap_or(base.level),
        reps: common.reps.or(file.reps).unwrap_or(base.reps),
        r_count: common.r_count.or(file.r_count).unwrap_or(base.r_count),
        seed: common.seed.or(file.seed).unwrap_or(base.seed),
        dims: pick(&common.dims, file.dims, defaults.dims, base.dims),
        p_dims: pick(&common.p_dims, file.p_dims, defaults.p_dims, base.p_dims),
        designs: pick(&common.designs, file.designs, defaults.designs, base.designs),
        covariance: common.covariance.clone().or(file_cov).unwrap_or(base.covariance),
        threads: common.threads.or(file.threads).unwrap_or(base.threads),
        sigma_redraws: common.sigma_redraws.or(file.sigma_redraws).unwrap_or(base.sigma_redraws),
        noise_sd: common
            .noise_sd
            .or(file.noise_sd)
            .or(defaults.noise_sd)
            .unwrap_or(base.noise_sd),
    };
    run.validate()?;
    let snr = match common.snr.clone().or(file.snr) {
        Some(v) => v,
        None => match defaults.snr_scaled {
            Some(scaled) => {
                let s = (run.n as f64).sqrt();
                scaled.iter().map(|v| v / s).collect()
            }
            None => default_snr_grid(run.n),
        },
    };
    if let Some(bad) = snr.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(CliError::Config(format!("snr must be finite and >= 0, got {bad}")));
    }
    let recipe_name = oracle.recipe.clone().or(file.recipe).unwrap_or_else(|| "tilted".into());
    let oracle = OracleSettings {
        recipe: parse_recipe(&recipe_name, &run.covariance)?,
        frames: oracle.frames.or(file.frames).unwrap_or(50),
        thresholds: oracle
            .thresholds
            .clone()
            .or(file.thresholds)
            .unwrap_or_else(|| vec![0.25, 0.5, 1.0]),
        gap_reps: oracle.gap_reps.or(file.gap_reps).unwrap_or(1000),
    };
    if oracle.frames == 0 || oracle.gap_reps == 0 || oracle.thresholds.is_empty() {
        return Err(CliError::Config("frames, gap_reps and thresholds must be nonempty".into()));
    }
    Ok(Resolved {
        run,
        snr,
        out_dir: common
            .out_dir
            .clone()
            .or(file.out_dir)
            .unwrap_or_else(|| PathBuf::from("out")),
        format: common.format.or(file.format).unwrap_or(Format::Csv),
        oracle,
    })
}

fn pick<T: Clone>(flag: &Option<Vec<T>>, file: Option<Vec<T>>, default: Option<Vec<T>>, base: Vec<T>) -> Vec<T> {
    flag.clone().or(file).or(default).unwrap_or(base)
}
