//! Monte Carlo engine for the size study and the F / normal approximation
//! diagnostics.
//!
//! Every random quantity is drawn from a substream keyed by its position in
//! the experiment (seed, design, `d`, `p`, redraw, `r`, `j`), and results
//! are reduced in index order, so output is bit-identical for any number of
//! worker threads.

use nalgebra::DVector;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{
    build_covariance, calibrate_theta, haar_orthogonal, null_theta, selection_matrix,
    surrogate_params, CovarianceSpec, DesignDistribution, ModelSpec, SamplingPlan,
};
use crate::error::{Error, Result};
use crate::linmodel::ks_sup_distance;
use crate::rng::StreamKey;
use crate::specfun::{f_cdf, f_quantile_central, normal_cdf, normal_quantile, FParams};

const DOMAIN_SIZE: u64 = 1;
const DOMAIN_DIAGNOSTICS: u64 = 2;
const DOMAIN_BENCHMARK: u64 = 3;

const STAGE_SETUP: u64 = 0;
const STAGE_ROTATION: u64 = 1;
const STAGE_DATA: u64 = 2;

/// Success probabilities of the binomial benchmark panel.
pub const BENCHMARK_LEVELS: [f64; 4] = [0.05, 0.1, 0.15, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    /// Nominal significance level α.
    pub level: f64,
    /// Replications per rotation draw.
    pub reps: usize,
    /// Number of rotation draws.
    pub r_count: usize,
    pub seed: u64,
    pub dims: Vec<usize>,
    pub p_dims: Vec<usize>,
    pub designs: Vec<DesignDistribution>,
    pub covariance: CovarianceSpec,
    pub threads: usize,
    /// Independent draws of (Σ, θ) per cell; rotation draws are repeated under each.
    pub sigma_redraws: usize,
    /// Standard deviation of the true-model error (zero in the size study).
    pub noise_sd: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 50,
            level: 0.05,
            reps: 1000,
            r_count: 100,
            seed: 0,
            dims: vec![2, 4, 10, 50, 100, 200],
            p_dims: vec![1, 2, 5, 25],
            designs: DesignDistribution::STUDY.to_vec(),
            covariance: CovarianceSpec::default(),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            sigma_redraws: 1,
            noise_sd: 0.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.reps == 0 {
            return fail("reps must be >= 1".into());
        }
        if self.r_count == 0 {
            return fail("r_count must be >= 1".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return fail(format!("level must lie in (0, 1), got {}", self.level));
        }
        if self.threads == 0 {
            return fail("threads must be >= 1".into());
        }
        if self.sigma_redraws == 0 {
            return fail("sigma_redraws must be >= 1".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return fail(format!("noise sd must be finite and >= 0, got {}", self.noise_sd));
        }
        if self.designs.is_empty() || self.dims.is_empty() || self.p_dims.is_empty() {
            return fail("designs, dims and p_dims must be nonempty".into());
        }
        if let Some(p) = self.p_dims.iter().find(|&&p| p == 0 || self.n <= p + 1) {
            return fail(format!("p = {p} violates 1 <= p and n = {} > p + 1", self.n));
        }
        Ok(())
    }

    /// All `(design, d, p)` cells with `p < d`, in report order.
    pub fn cells(&self) -> Vec<(DesignDistribution, usize, usize)> {
        let mut out = Vec::new();
        for &design in &self.designs {
            for &d in &self.dims {
                for &p in &self.p_dims {
                    if p < d {
                        out.push((design, d, p));
                    }
                }
            }
        }
        out
    }

    fn check_cell(&self, d: usize, p: usize) -> Result<()> {
        if p == 0 || p >= d {
            return Err(Error::Config(format!("cell needs 1 <= p < d, got p = {p}, d = {d}")));
        }
        if self.n <= p + 1 {
            return Err(Error::Config(format!("cell needs n > p + 1, got n = {}, p = {p}", self.n)));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
    }

    /// Rejection threshold `F^{-1}_{p, n-p-1}(1 - α)`.
    pub fn threshold(&self, p: usize) -> Result<f64> {
        f_quantile_central(1.0 - self.level, p as u32, (self.n - p - 1) as u32)
    }

    /// Root key of the size-study cell.
    pub fn cell_key(&self, design: DesignDistribution, d: usize, p: usize) -> StreamKey {
        StreamKey::root(self.seed).path(&[DOMAIN_SIZE, design.tag(), d as u64, p as u64])
    }
}

/// What is needed to re-run a cell bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTrace {
    pub seed: u64,
    pub cell_key: u64,
    pub sigma_redraws: usize,
    pub r_count: usize,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub design: DesignDistribution,
    pub d: usize,
    pub p: usize,
    pub threshold: f64,
    /// Rejection counts out of `reps`, one per rotation draw.
    pub rejections: Vec<u32>,
    /// Empirical rejection rates `p̄_r`.
    pub pbars: Vec<f64>,
    /// `D̄ = mean_r |p̄_r - α|`.
    pub dbar: f64,
    pub seed_trace: SeedTrace,
}

impl CellResult {
    pub fn median_pbar(&self) -> f64 {
        median(&self.pbars)
    }
}

pub fn mean_abs_deviation(pbars: &[f64], level: f64) -> f64 {
    pbars.iter().map(|p| (p - level).abs()).sum::<f64>() / pbars.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Fixed part of a cell: `Σ`, `M`, `θ` under one redraw.
fn cell_model(
    cfg: &RunConfig,
    design: DesignDistribution,
    d: usize,
    p: usize,
    setup: StreamKey,
) -> Result<ModelSpec> {
    let mut rng = setup.rng();
    let covariance = build_covariance(&cfg.covariance, d, &mut rng)?;
    let submodel = selection_matrix(d, p)?;
    let theta = null_theta(&covariance, &submodel, &mut rng)?;
    Ok(ModelSpec {
        n: cfg.n,
        theta,
        intercept: 0.0,
        mu: DVector::zeros(d),
        covariance,
        rotation: nalgebra::DMatrix::identity(d, d),
        design,
        noise_sd: cfg.noise_sd,
        submodel,
    })
}

/// Count rejections over `reps` datasets drawn under one rotation.
fn count_rejections(plan: &SamplingPlan, key: StreamKey, reps: usize, threshold: f64) -> u32 {
    let mut ws = plan.workspace();
    let mut count = 0;
    for j in 0..reps {
        let mut rng = key.child(j as u64).rng();
        if plan.sample_fstat(&mut rng, &mut ws) > threshold {
            count += 1;
        }
    }
    count
}

fn run_cell_inner(
    cfg: &RunConfig,
    design: DesignDistribution,
    d: usize,
    p: usize,
) -> Result<CellResult> {
    cfg.check_cell(d, p)?;
    let threshold = cfg.threshold(p)?;
    let cell = cfg.cell_key(design, d, p);
    let mut rejections = Vec::with_capacity(cfg.sigma_redraws * cfg.r_count);
    for k in 0..cfg.sigma_redraws as u64 {
        let base = cell_model(cfg, design, d, p, cell.path(&[k, STAGE_SETUP]))?;
        let counts: Vec<u32> = (0..cfg.r_count as u64)
            .into_par_iter()
            .map(|r| {
                let mut spec = base.clone();
                spec.rotation = haar_orthogonal(d, &mut cell.path(&[k, STAGE_ROTATION, r]).rng());
                let plan = SamplingPlan::new(&spec);
                count_rejections(&plan, cell.path(&[k, STAGE_DATA, r]), cfg.reps, threshold)
            })
            .collect();
        rejections.extend(counts);
    }
    let pbars: Vec<f64> = rejections
        .iter()
        .map(|&c| f64::from(c) / cfg.reps as f64)
        .collect();
    let dbar = mean_abs_deviation(&pbars, cfg.level);
    Ok(CellResult {
        design,
        d,
        p,
        threshold,
        rejections,
        pbars,
        dbar,
        seed_trace: SeedTrace {
            seed: cfg.seed,
            cell_key: cell.value(),
            sigma_redraws: cfg.sigma_redraws,
            r_count: cfg.r_count,
            reps: cfg.reps,
        },
    })
}

/// Simulated size of the F-test for one `(design, d, p)` cell.
pub fn run_cell(cfg: &RunConfig, design: DesignDistribution, d: usize, p: usize) -> Result<CellResult> {
    cfg.validate()?;
    cfg.pool()?.install(|| run_cell_inner(cfg, design, d, p))
}

/// All staircase cells of the configured grid.
pub fn table1(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    table1_with_progress(cfg, |_| {})
}

/// [`table1`] with a callback after each finished cell.
pub fn table1_with_progress<F>(cfg: &RunConfig, mut progress: F) -> Result<Vec<CellResult>>
where
    F: FnMut(&CellResult) + Send,
{
    cfg.validate()?;
    let cells = cfg.cells();
    if cells.is_empty() {
        return Err(Error::Config("grid contains no cell with p < d".into()));
    }
    let pool = cfg.pool()?;
    pool.install(|| {
        cells
            .into_iter()
            .map(|(design, d, p)| {
                let res = run_cell_inner(cfg, design, d, p)?;
                progress(&res);
                Ok(res)
            })
            .collect()
    })
}

/// Rejection-rate samples for the box-plot figures: one cell per design and
/// dimension at the single configured `p`.
pub fn boxplot_data(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    if cfg.p_dims.len() != 1 {
        return Err(Error::Config(format!(
            "box plots use a single p, got {:?}",
            cfg.p_dims
        )));
    }
    let p = cfg.p_dims[0];
    if let Some(d) = cfg.dims.iter().find(|&&d| d <= p) {
        return Err(Error::Config(format!("box-plot dimension d = {d} is not above p = {p}")));
    }
    table1(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkColumn {
    pub success: f64,
    pub draws: Vec<f64>,
}

/// `r_count` draws of `Binomial(reps, a) / reps` for each benchmark level `a`.
pub fn benchmark_panel(cfg: &RunConfig) -> Result<Vec<BenchmarkColumn>> {
    cfg.validate()?;
    BENCHMARK_LEVELS
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let binom = Binomial::new(cfg.reps as u64, a)
                .map_err(|e| Error::Config(format!("binomial({}, {a}): {e}", cfg.reps)))?;
            let mut rng = StreamKey::root(cfg.seed)
                .path(&[DOMAIN_BENCHMARK, i as u64])
                .rng();
            let draws = (0..cfg.r_count)
                .map(|_| binom.sample(&mut rng) as f64 / cfg.reps as f64)
                .collect();
            Ok(BenchmarkColumn { success: a, draws })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsResult {
    pub design: DesignDistribution,
    pub d: usize,
    pub p: usize,
    /// Target signal-to-noise ratio Δ (also the reference noncentrality / n).
    pub snr: f64,
    /// Δ recomputed from the realised θ.
    pub realized_snr: f64,
    pub replications: usize,
    /// `sup_t |F̂_N(t) - F_{p, n-p-1, nΔ}(t)|`.
    pub ks_vs_noncentral_f: f64,
    /// Fraction of statistics above the central `(1 - α)` quantile.
    pub rejection_rate: f64,
    /// `Φ(-Φ^{-1}(1 - α) + √n Δ √((1 - p/n) / (2p/n)))`.
    pub normal_approx: f64,
    /// Rejection probability under the noncentral F reference.
    pub noncentral_f_power: f64,
    /// `rejection_rate - normal_approx`.
    pub gap: f64,
}

/// Normal approximation to the power of the level-α F-test at signal to
/// noise ratio `snr`; equals `level` at `snr = 0`.
pub fn normal_power_approx(n: usize, p: usize, level: f64, snr: f64) -> Result<f64> {
    let ratio = p as f64 / n as f64;
    let shift = (n as f64).sqrt() * snr * ((1.0 - ratio) / (2.0 * ratio)).sqrt();
    Ok(normal_cdf(-normal_quantile(1.0 - level)? + shift))
}

/// Empirical counterparts of the noncentral-F and normal approximations for
/// one design at signal-to-noise ratio `snr`, from `reps * r_count`
/// statistics under a single Haar rotation.
pub fn theorem1_diagnostics(
    design: DesignDistribution,
    d: usize,
    p: usize,
    snr: f64,
    cfg: &RunConfig,
) -> Result<DiagnosticsResult> {
    cfg.validate()?;
    cfg.pool()?.install(|| diagnostics_inner(design, d, p, snr, cfg))
}

/// [`theorem1_diagnostics`] over every cell and signal-to-noise ratio.
pub fn diagnostics_grid(cfg: &RunConfig, snrs: &[f64]) -> Result<Vec<DiagnosticsResult>> {
    cfg.validate()?;
    let cells = cfg.cells();
    if cells.is_empty() {
        return Err(Error::Config("grid contains no cell with p < d".into()));
    }
    let pool = cfg.pool()?;
    pool.install(|| {
        let mut out = Vec::new();
        for (design, d, p) in cells {
            for &snr in snrs {
                out.push(diagnostics_inner(design, d, p, snr, cfg)?);
            }
        }
        Ok(out)
    })
}

fn diagnostics_inner(
    design: DesignDistribution,
    d: usize,
    p: usize,
    snr: f64,
    cfg: &RunConfig,
) -> Result<DiagnosticsResult> {
    cfg.check_cell(d, p)?;
    if !(snr >= 0.0 && snr.is_finite()) {
        return Err(Error::Config(format!("snr must be finite and >= 0, got {snr}")));
    }
    let key = StreamKey::root(cfg.seed).path(&[
        DOMAIN_DIAGNOSTICS,
        design.tag(),
        d as u64,
        p as u64,
        snr.to_bits(),
    ]);
    let mut spec = cell_model(cfg, design, d, p, key.child(STAGE_SETUP))?;
    if snr > 0.0 {
        let mut rng = key.path(&[STAGE_SETUP, 1]).rng();
        let v = DVector::from_fn(p, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        spec.theta = calibrate_theta(
            &spec.covariance,
            &spec.submodel,
            &spec.theta,
            &v,
            cfg.noise_sd * cfg.noise_sd,
            snr,
        )?;
    }
    spec.rotation = haar_orthogonal(d, &mut key.child(STAGE_ROTATION).rng());
    let realized_snr = surrogate_params(&spec)?.snr;
    let plan = SamplingPlan::new(&spec);
    let data_key = key.child(STAGE_DATA);
    let reps = cfg.reps;
    let stats: Vec<f64> = (0..cfg.r_count as u64)
        .into_par_iter()
        .flat_map_iter(|chunk| {
            let mut ws = plan.workspace();
            let chunk_key = data_key.child(chunk);
            (0..reps as u64)
                .map(|j| plan.sample_fstat(&mut chunk_key.child(j).rng(), &mut ws))
                .collect::<Vec<_>>()
        })
        .collect();

    let df1 = p as u32;
    let df2 = (cfg.n - p - 1) as u32;
    let reference = FParams::new(df1, df2, cfg.n as f64 * snr)?;
    let ks = ks_sup_distance(&stats, |t| f_cdf(t, reference))?;
    let threshold = cfg.threshold(p)?;
    let rejected = stats.iter().filter(|&&f| f > threshold).count();
    let rejection_rate = rejected as f64 / stats.len() as f64;
    let normal_approx = normal_power_approx(cfg.n, p, cfg.level, snr)?;
    Ok(DiagnosticsResult {
        design,
        d,
        p,
        snr,
        realized_snr,
        replications: stats.len(),
        ks_vs_noncentral_f: ks,
        rejection_rate,
        normal_approx,
        noncentral_f_power: 1.0 - f_cdf(threshold, reference),
        gap: rejection_rate - normal_approx,
    })
}

/// Default signal-to-noise grid `{0, 0.1, 0.3, 1} / √n`.
pub fn default_snr_grid(n: usize) -> Vec<f64> {
    let s = (n as f64).sqrt();
    vec![0.0, 0.1 / s, 0.3 / s, 1.0 / s]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        RunConfig {
            reps: 200,
            r_count: 6,
            seed: 11,
            dims: vec![6],
            p_dims: vec![2],
            designs: vec![DesignDistribution::ExponentialCentered],
            threads: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let good = small_cfg();
        assert!(good.validate().is_ok());
        for bad in [
            RunConfig { reps: 0, ..small_cfg() },
            RunConfig { r_count: 0, ..small_cfg() },
            RunConfig { level: 1.0, ..small_cfg() },
            RunConfig { level: 0.0, ..small_cfg() },
            RunConfig { threads: 0, ..small_cfg() },
            RunConfig { p_dims: vec![49], ..small_cfg() },
            RunConfig { designs: vec![], ..small_cfg() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn staircase_cells() {
        let cfg = RunConfig {
            designs: vec![DesignDistribution::Gaussian],
            ..RunConfig::default()
        };
        let cells: Vec<(usize, usize)> = cfg.cells().into_iter().map(|(_, d, p)| (d, p)).collect();
        assert_eq!(cells.len(), 1 + 2 + 3 + 4 + 4 + 4);
        assert!(cells.iter().all(|(d, p)| p < d));
        assert!(!cells.contains(&(4, 5)));
        assert!(cells.contains(&(50, 25)));
    }

    #[test]
    fn cell_counting_identity() {
        let cfg = small_cfg();
        let res = run_cell(&cfg, DesignDistribution::ExponentialCentered, 6, 2).unwrap();
        assert_eq!(res.pbars.len(), cfg.r_count);
        for (&c, &pb) in res.rejections.iter().zip(&res.pbars) {
            assert_eq!(pb, f64::from(c) / cfg.reps as f64);
            assert!((0.0..=1.0).contains(&pb));
        }
        assert_eq!(res.dbar, mean_abs_deviation(&res.pbars, cfg.level));
    }

    #[test]
    fn cell_rejects_bad_grid() {
        let cfg = small_cfg();
        assert!(run_cell(&cfg, DesignDistribution::Gaussian, 3, 3).is_err());
        assert!(run_cell(&cfg, DesignDistribution::Gaussian, 60, 49).is_err());
    }

    #[test]
    fn sigma_redraws_extend_pbars() {
        let cfg = RunConfig { sigma_redraws: 2, ..small_cfg() };
        let res = run_cell(&cfg, DesignDistribution::Gaussian, 6, 2).unwrap();
        assert_eq!(res.pbars.len(), 2 * cfg.r_count);
        let single = run_cell(&small_cfg(), DesignDistribution::Gaussian, 6, 2).unwrap();
        assert_eq!(&res.pbars[..cfg.r_count], &single.pbars[..]);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let one = run_cell(&RunConfig { threads: 1, ..small_cfg() }, DesignDistribution::StudentT(3), 6, 2).unwrap();
        let four = run_cell(&RunConfig { threads: 4, ..small_cfg() }, DesignDistribution::StudentT(3), 6, 2).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn benchmark_shape() {
        let cfg = RunConfig { r_count: 100, reps: 1000, ..small_cfg() };
        let panel = benchmark_panel(&cfg).unwrap();
        assert_eq!(panel.len(), 4);
        for col in &panel {
            assert_eq!(col.draws.len(), 100);
            for v in &col.draws {
                let k = v * 1000.0;
                assert!((k - k.round()).abs() < 1e-9);
            }
        }
        let mean = panel[0].draws.iter().sum::<f64>() / 100.0;
        assert!((mean - 0.05).abs() <= 4.0 * 0.0069 / 10.0);
    }

    #[test]
    fn normal_approx_at_null_is_level() {
        for p in [1, 5, 25] {
            let v = normal_power_approx(50, p, 0.05, 0.0).unwrap();
            assert!((v - 0.05).abs() < 1e-12);
        }
        assert!(normal_power_approx(50, 5, 0.05, 0.1).unwrap() > 0.05);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
