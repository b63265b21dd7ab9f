use std::path::Path;
use std::time::Instant;

use ftest_core::dgp::DesignDistribution;
use ftest_core::mc::{
    benchmark_panel, boxplot_data, diagnostics_grid, run_cell, table1_with_progress, CellResult,
    DiagnosticsResult, BENCHMARK_LEVELS,
};
use ftest_core::oracle::{
    fstat_gap_study, frame_model, risk_ratio, tail_probe, EnumeratedModel, GapConfig, TailProbeConfig,
};
use ftest_core::rng::StreamKey;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Format, Resolved};
use crate::output::{prepare_dir, write_rows, write_table, CellSeed, RunManifest};
use crate::CliError;

const DOMAIN_ORACLE_MODEL: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub design: DesignDistribution,
    pub d: usize,
    pub p: usize,
    pub dbar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub design: DesignDistribution,
    pub d: usize,
    pub p: usize,
    pub r: usize,
    pub pbar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotRow {
    pub design: DesignDistribution,
    pub d: usize,
    pub r: usize,
    pub pbar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Row {
    pub design: DesignDistribution,
    pub d: usize,
    pub p: usize,
    pub snr: f64,
    pub ks: f64,
    pub rejection: f64,
    pub normal_approx: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub design: DesignDistribution,
    pub d: usize,
    pub p: usize,
    pub snr: f64,
    pub realized_snr: f64,
    pub rejection: f64,
    pub noncentral_f: f64,
    pub normal_approx: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub design: DesignDistribution,
    pub recipe: String,
    pub d: usize,
    pub p: usize,
    pub t: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub design: DesignDistribution,
    pub recipe: String,
    pub d: usize,
    pub p: usize,
    pub risk_ratio: f64,
    pub inverse_ratio: f64,
    pub mean_var_dev: f64,
    pub expected_max_var_dev: f64,
    pub gap_median: f64,
    pub gap_q90: f64,
    pub ks_substitute: f64,
    pub ks_original: f64,
    pub excluded: usize,
}

struct Run<'a> {
    name: &'static str,
    res: &'a Resolved,
    started: Instant,
    outputs: Vec<String>,
    cells: Vec<CellSeed>,
}

impl<'a> Run<'a> {
    fn start(name: &'static str, res: &'a Resolved) -> Result<Self, CliError> {
        prepare_dir(&res.out_dir)?;
        Ok(Self {
            name,
            res,
            started: Instant::now(),
            outputs: Vec::new(),
            cells: Vec::new(),
        })
    }

    fn dir(&self) -> &Path {
        &self.res.out_dir
    }

    fn format(&self) -> Format {
        self.res.format
    }

    fn finish(self, with_snr: bool, with_oracle: bool) -> Result<(), CliError> {
        let manifest = RunManifest {
            tool: "ftest-sim".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.name.to_string(),
            config: self.res.run.clone(),
            snr: if with_snr { self.res.snr.clone() } else { Vec::new() },
            oracle: with_oracle.then(|| self.res.oracle.clone()),
            format: self.res.format,
            cells: self.cells,
            outputs: self.outputs,
            threads: self.res.run.threads,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = manifest.write(&self.res.out_dir)?;
        println!(
            "wrote {} ({:.1}s)",
            path.display(),
            manifest.wall_clock_secs
        );
        Ok(())
    }
}

fn cell_seed(c: &CellResult) -> CellSeed {
    CellSeed {
        design: c.design,
        d: c.d,
        p: c.p,
        snr: None,
        trace: Some(c.seed_trace.clone()),
    }
}

fn report_cell(c: &CellResult) {
    eprintln!(
        "  {:<10} d={:<5} p={:<3} dbar={:.4} median={:.3}",
        c.design.name(),
        c.d,
        c.p,
        c.dbar,
        c.median_pbar()
    );
}

fn print_dbar_grid(cells: &[CellResult]) {
    let mut ps: Vec<usize> = cells.iter().map(|c| c.p).collect();
    ps.sort_unstable();
    ps.dedup();
    let mut designs: Vec<DesignDistribution> = Vec::new();
    for c in cells {
        if !designs.contains(&c.design) {
            designs.push(c.design);
        }
    }
    for design in designs {
        println!("{design}");
        print!("{:>8}", "d");
        for p in &ps {
            print!("{:>9}", format!("p={p}"));
        }
        println!();
        let mut dims: Vec<usize> = cells.iter().filter(|c| c.design == design).map(|c| c.d).collect();
        dims.dedup();
        for d in dims {
            print!("{d:>8}");
            for &p in &ps {
                match cells.iter().find(|c| c.design == design && c.d == d && c.p == p) {
                    Some(c) => print!("{:>9.3}", c.dbar),
                    None => print!("{:>9}", ""),
                }
            }
            println!();
        }
    }
}

pub fn table1(res: &Resolved) -> Result<(), CliError> {
    let mut run = Run::start("table1", res)?;
    eprintln!("table1: {} cells", res.run.cells().len());
    let cells = table1_with_progress(&res.run, report_cell)?;
    let summary: Vec<Table1Row> = cells
        .iter()
        .map(|c| Table1Row {
            design: c.design,
            d: c.d,
            p: c.p,
            dbar: c.dbar,
        })
        .collect();
    let detail: Vec<CellRow> = cells
        .iter()
        .flat_map(|c| {
            c.pbars.iter().enumerate().map(|(r, &pbar)| CellRow {
                design: c.design,
                d: c.d,
                p: c.p,
                r,
                pbar,
            })
        })
        .collect();
    run.outputs.push(write_rows(run.dir(), "table1", &summary, run.format())?);
    run.outputs.push(write_rows(run.dir(), "cells", &detail, run.format())?);
    run.cells = cells.iter().map(cell_seed).collect();
    print_dbar_grid(&cells);
    run.finish(false, false)
}

pub fn boxplots(res: &Resolved) -> Result<(), CliError> {
    let mut run = Run::start("boxplots", res)?;
    let cells = boxplot_data(&res.run)?;
    let rows: Vec<BoxplotRow> = cells
        .iter()
        .flat_map(|c| {
            c.pbars.iter().enumerate().map(|(r, &pbar)| BoxplotRow {
                design: c.design,
                d: c.d,
                r,
                pbar,
            })
        })
        .collect();
    run.outputs.push(write_rows(run.dir(), "boxplot", &rows, run.format())?);
    run.cells = cells.iter().map(cell_seed).collect();
    for c in &cells {
        let mut sorted = c.pbars.clone();
        sorted.sort_by(f64::total_cmp);
        println!(
            "{:<10} d={:<5} min={:.3} median={:.3} max={:.3}",
            c.design.name(),
            c.d,
            sorted[0],
            c.median_pbar(),
            sorted[sorted.len() - 1]
        );
    }
    run.finish(false, false)
}

pub fn benchmark(res: &Resolved) -> Result<(), CliError> {
    let mut run = Run::start("benchmark", res)?;
    let columns = benchmark_panel(&res.run)?;
    let header: Vec<String> = BENCHMARK_LEVELS.iter().map(|a| format!("level_{a}")).collect();
    let rows: Vec<Vec<String>> = (0..res.run.r_count)
        .map(|r| columns.iter().map(|c| c.draws[r].to_string()).collect())
        .collect();
    run.outputs.push(write_table(run.dir(), "benchmark", &header, &rows, run.format())?);
    for c in &columns {
        let mean = c.draws.iter().sum::<f64>() / c.draws.len() as f64;
        println!("level {:<5} mean={mean:.4} draws={}", c.success, c.draws.len());
    }
    run.finish(false, false)
}

fn diagnostics<'a>(name: &'static str, res: &'a Resolved) -> Result<(Run<'a>, Vec<DiagnosticsResult>), CliError> {
    let mut run = Run::start(name, res)?;
    let results = diagnostics_grid(&res.run, &res.snr)?;
    run.cells = results
        .iter()
        .map(|r| CellSeed {
            design: r.design,
            d: r.d,
            p: r.p,
            snr: Some(r.snr),
            trace: None,
        })
        .collect();
    for r in &results {
        println!(
            "{:<10} d={:<5} p={:<3} snr={:.4} ks={:.4} rejection={:.4} normal={:.4} nc_f={:.4}",
            r.design.name(),
            r.d,
            r.p,
            r.snr,
            r.ks_vs_noncentral_f,
            r.rejection_rate,
            r.normal_approx,
            r.noncentral_f_power
        );
    }
    Ok((run, results))
}

pub fn theorem1(res: &Resolved) -> Result<(), CliError> {
    let (mut run, results) = diagnostics("theorem1", res)?;
    let rows: Vec<Theorem1Row> = results
        .iter()
        .map(|r| Theorem1Row {
            design: r.design,
            d: r.d,
            p: r.p,
            snr: r.snr,
            ks: r.ks_vs_noncentral_f,
            rejection: r.rejection_rate,
            normal_approx: r.normal_approx,
            gap: r.gap,
        })
        .collect();
    run.outputs.push(write_rows(run.dir(), "theorem1", &rows, run.format())?);
    run.finish(true, false)
}

pub fn power(res: &Resolved) -> Result<(), CliError> {
    let (mut run, results) = diagnostics("power", res)?;
    let rows: Vec<PowerRow> = results
        .iter()
        .map(|r| PowerRow {
            design: r.design,
            d: r.d,
            p: r.p,
            snr: r.snr,
            realized_snr: r.realized_snr,
            rejection: r.rejection_rate,
            noncentral_f: r.noncentral_f_power,
            normal_approx: r.normal_approx,
        })
        .collect();
    run.outputs.push(write_rows(run.dir(), "power", &rows, run.format())?);
    run.finish(true, false)
}

pub fn oracle(res: &Resolved) -> Result<(), CliError> {
    let mut run = Run::start("oracle", res)?;
    let cfg = &res.run;
    let settings = &res.oracle;
    let recipe = settings.recipe.name().to_string();
    for design in &cfg.designs {
        if !matches!(design, DesignDistribution::Rademacher | DesignDistribution::Gaussian) {
            return Err(CliError::Config(format!(
                "oracle supports the rademacher and gauss designs, got `{design}`"
            )));
        }
    }
    let mut tail_rows = Vec::new();
    let mut model_rows = Vec::new();
    for &design in &cfg.designs {
        for &p in &cfg.p_dims {
            let dims: Vec<usize> = cfg.dims.iter().copied().filter(|&d| d > p).collect();
            if dims.is_empty() {
                continue;
            }
            let probe = tail_probe(&TailProbeConfig {
                design,
                recipe: settings.recipe.clone(),
                p,
                dims: dims.clone(),
                thresholds: settings.thresholds.clone(),
                frames: settings.frames,
                seed: cfg.seed,
            })?;
            for row in probe {
                let (min, max) = row
                    .probabilities
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                tail_rows.push(TailRow {
                    design,
                    recipe: recipe.clone(),
                    d: row.d,
                    p,
                    t: row.t,
                    median: row.median,
                    min,
                    max,
                });
            }
            for &d in &dims {
                let key = StreamKey::root(cfg.seed).path(&[DOMAIN_ORACLE_MODEL, design.tag(), d as u64, p as u64]);
                let frame = settings.recipe.frame(d, p, key.child(0))?;
                let spec = frame_model(&frame, design, cfg.n, None, cfg.noise_sd, key.child(1))?;
                let ratio = risk_ratio(&spec)?;
                let (mean_var_dev, expected_max_var_dev) = match design {
                    DesignDistribution::Rademacher => {
                        let model = EnumeratedModel::new(&spec)?;
                        let profile = model.conditional_variance_profile();
                        (
                            profile.mean_abs_deviation,
                            model.expected_sample_max_variance_deviation(cfg.n),
                        )
                    }
                    _ => (0.0, 0.0),
                };
                let gap = fstat_gap_study(
                    &spec,
                    &GapConfig {
                        replications: settings.gap_reps,
                        seed: key.child(2).value(),
                    },
                )?;
                eprintln!(
                    "  {:<10} d={d:<3} p={p:<2} R_N/R_L={:.5} gap median={:.4}",
                    design.name(),
                    ratio.ratio,
                    gap.median
                );
                model_rows.push(ModelRow {
                    design,
                    recipe: recipe.clone(),
                    d,
                    p,
                    risk_ratio: ratio.ratio,
                    inverse_ratio: ratio.inverse,
                    mean_var_dev,
                    expected_max_var_dev,
                    gap_median: gap.median,
                    gap_q90: gap.q90,
                    ks_substitute: gap.ks_substitute,
                    ks_original: gap.ks_original,
                    excluded: gap.excluded_observations,
                });
            }
        }
    }
    if model_rows.is_empty() {
        return Err(CliError::Config("oracle grid contains no cell with p < d".into()));
    }
    for r in &tail_rows {
        println!(
            "{:<10} {} d={:<3} p={:<2} t={:<5} P(dev > t) median={:.4}",
            r.design.name(),
            r.recipe,
            r.d,
            r.p,
            r.t,
            r.median
        );
    }
    run.outputs.push(write_rows(run.dir(), "oracle_tail", &tail_rows, run.format())?);
    run.outputs.push(write_rows(run.dir(), "oracle_models", &model_rows, run.format())?);
    run.finish(false, true)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, format: Format) -> Result<Vec<T>, CliError> {
    let err = |e: &dyn std::fmt::Display| CliError::Config(format!("{}: {e}", path.display()));
    match format {
        Format::Csv => {
            let mut reader = csv::Reader::from_path(path).map_err(|e| err(&e))?;
            reader.deserialize().collect::<Result<_, _>>().map_err(|e| err(&e))
        }
        Format::Json => {
            let text = std::fs::read_to_string(path).map_err(|e| err(&e))?;
            serde_json::from_str(&text).map_err(|e| err(&e))
        }
    }
}

/// Re-runs one recorded cell and compares it with the stored rows.
pub fn verify(dir: &Path, cell: Option<usize>, seed: Option<u64>, threads: Option<usize>) -> Result<bool, CliError> {
    let manifest = crate::output::RunManifest::read(dir)?;
    let stored: Vec<(DesignDistribution, usize, usize, usize, f64)> = match manifest.command.as_str() {
        "table1" => read_rows::<CellRow>(&dir.join(format!("cells.{}", manifest.format.extension())), manifest.format)?
            .into_iter()
            .map(|r| (r.design, r.d, r.p, r.r, r.pbar))
            .collect(),
        "boxplots" => {
            let p = manifest.config.p_dims[0];
            read_rows::<BoxplotRow>(&dir.join(format!("boxplot.{}", manifest.format.extension())), manifest.format)?
                .into_iter()
                .map(|r| (r.design, r.d, p, r.r, r.pbar))
                .collect()
        }
        other => {
            return Err(CliError::Config(format!(
                "verify supports table1 and boxplots runs, found `{other}`"
            )))
        }
    };
    if manifest.cells.is_empty() {
        return Err(CliError::Config("manifest lists no cells".into()));
    }
    let index = match cell {
        Some(i) if i < manifest.cells.len() => i,
        Some(i) => {
            return Err(CliError::Config(format!(
                "cell {i} out of range (manifest has {})",
                manifest.cells.len()
            )))
        }
        None => {
            let mut rng = StreamKey::root(seed.unwrap_or(manifest.config.seed)).child(u64::MAX).rng();
            rng.random_range(0..manifest.cells.len())
        }
    };
    let target = &manifest.cells[index];
    let mut cfg = manifest.config.clone();
    if let Some(t) = threads {
        cfg.threads = t;
    }
    let rerun = run_cell(&cfg, target.design, target.d, target.p)?;
    if let Some(trace) = &target.trace {
        if *trace != rerun.seed_trace {
            println!("seed trace differs for cell {index}");
            return Ok(false);
        }
    }
    let recorded: Vec<f64> = stored
        .iter()
        .filter(|s| s.0 == target.design && s.1 == target.d && s.2 == target.p)
        .map(|s| s.4)
        .collect();
    let same = recorded == rerun.pbars;
    println!(
        "cell {index} ({} d={} p={}): {} of {} rejection rates {}",
        target.design.name(),
        target.d,
        target.p,
        rerun.pbars.len(),
        recorded.len(),
        if same { "match" } else { "DIFFER" }
    );
    Ok(same)
}
