//! Data-generating process.
//!
//! The true model is `y = ϑ + θ'z + ε` with `z = μ + Σ^{1/2} R z̃`, where `z̃`
//! has i.i.d. mean-zero components drawn from a [`DesignDistribution`]. The
//! working model regresses `y` on `x = M'z`. This module builds the pieces
//! (covariances, Haar rotations, selection matrices, null and calibrated
//! coefficient vectors), evaluates the surrogate parameters of the working
//! model, and samples datasets.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{f_statistic_from_buffer, sym_sqrt, Dataset};
use crate::specfun::ln_gamma_unchecked;

/// Law of the i.i.d. components of `z̃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DesignDistribution {
    StudentT(u32),
    ExponentialCentered,
    UniformSymmetric,
    Rademacher,
    Gaussian,
}

impl DesignDistribution {
    /// The seven laws of the default size grid, in table order.
    pub const STUDY: [DesignDistribution; 7] = [
        DesignDistribution::StudentT(5),
        DesignDistribution::ExponentialCentered,
        DesignDistribution::StudentT(3),
        DesignDistribution::UniformSymmetric,
        DesignDistribution::StudentT(2),
        DesignDistribution::Gaussian,
        DesignDistribution::Rademacher,
    ];

    pub fn name(&self) -> String {
        match self {
            DesignDistribution::StudentT(df) => format!("t{df}"),
            DesignDistribution::ExponentialCentered => "exp".into(),
            DesignDistribution::UniformSymmetric => "unif".into(),
            DesignDistribution::Rademacher => "rademacher".into(),
            DesignDistribution::Gaussian => "gauss".into(),
        }
    }

    /// Stable integer used in stream keys.
    pub fn tag(&self) -> u64 {
        match self {
            DesignDistribution::StudentT(df) => 100 + u64::from(*df),
            DesignDistribution::ExponentialCentered => 1,
            DesignDistribution::UniformSymmetric => 2,
            DesignDistribution::Rademacher => 3,
            DesignDistribution::Gaussian => 4,
        }
    }

    /// Variance of the raw law, `None` when infinite.
    pub fn variance(&self) -> Option<f64> {
        match self {
            DesignDistribution::StudentT(df) if *df > 2 => {
                let v = f64::from(*df);
                Some(v / (v - 2.0))
            }
            DesignDistribution::StudentT(_) => None,
            DesignDistribution::ExponentialCentered => Some(1.0),
            DesignDistribution::UniformSymmetric => Some(1.0 / 3.0),
            DesignDistribution::Rademacher | DesignDistribution::Gaussian => Some(1.0),
        }
    }

    /// Factor mapping raw draws to unit variance (1 when the variance is infinite).
    pub fn standardizer(&self) -> f64 {
        self.variance().map_or(1.0, |v| 1.0 / v.sqrt())
    }

    /// One draw from the raw (unscaled) law.
    pub fn sample_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            DesignDistribution::StudentT(df) => student_t(*df).sample(rng),
            DesignDistribution::ExponentialCentered => {
                let e: f64 = Exp1.sample(rng);
                e - 1.0
            }
            DesignDistribution::UniformSymmetric => rng.random_range(-1.0..1.0),
            DesignDistribution::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            DesignDistribution::Gaussian => StandardNormal.sample(rng),
        }
    }

    /// Fill `out` with i.i.d. draws scaled to unit variance where finite.
    pub fn fill_standardized<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let scale = self.standardizer();
        match self {
            DesignDistribution::StudentT(df) => {
                let t = student_t(*df);
                for v in out.iter_mut() {
                    let draw: f64 = t.sample(rng);
                    *v = scale * draw;
                }
            }
            DesignDistribution::ExponentialCentered => {
                for v in out.iter_mut() {
                    let e: f64 = Exp1.sample(rng);
                    *v = e - 1.0;
                }
            }
            DesignDistribution::UniformSymmetric => {
                for v in out.iter_mut() {
                    *v = scale * rng.random_range(-1.0..1.0);
                }
            }
            DesignDistribution::Rademacher => {
                for chunk in out.chunks_mut(64) {
                    let bits: u64 = rng.random();
                    for (i, v) in chunk.iter_mut().enumerate() {
                        *v = if (bits >> i) & 1 == 1 { 1.0 } else { -1.0 };
                    }
                }
            }
            DesignDistribution::Gaussian => {
                for v in out.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
            }
        }
    }

    /// Analytic density and absolute-moment bounds of the raw law.
    pub fn moment_check(&self, k: u32) -> MomentReport {
        let k = k.max(1);
        let moment = |j: u32| -> f64 {
            let jf = f64::from(j);
            match self {
                DesignDistribution::Gaussian => {
                    (0.5 * jf * 2f64.ln() + ln_gamma_unchecked(0.5 * (jf + 1.0))).exp()
                        / std::f64::consts::PI.sqrt()
                }
                DesignDistribution::UniformSymmetric => 1.0 / (jf + 1.0),
                DesignDistribution::Rademacher => 1.0,
                DesignDistribution::ExponentialCentered => centered_exp_abs_moment(j),
                DesignDistribution::StudentT(df) => {
                    let v = f64::from(*df);
                    if jf >= v {
                        f64::INFINITY
                    } else {
                        (0.5 * jf * v.ln() + ln_gamma_unchecked(0.5 * (jf + 1.0))
                            + ln_gamma_unchecked(0.5 * (v - jf))
                            - ln_gamma_unchecked(0.5 * v))
                        .exp()
                            / std::f64::consts::PI.sqrt()
                    }
                }
            }
        };
        let max_abs_moment = (1..=k).map(moment).fold(0.0, f64::max);
        let first_infinite = (1..=k).find(|&j| moment(j).is_infinite());
        let density_bound = match self {
            DesignDistribution::Gaussian => Some(1.0 / (2.0 * std::f64::consts::PI).sqrt()),
            DesignDistribution::UniformSymmetric => Some(0.5),
            DesignDistribution::ExponentialCentered => Some(1.0),
            DesignDistribution::Rademacher => None,
            DesignDistribution::StudentT(df) => {
                let v = f64::from(*df);
                Some(
                    (ln_gamma_unchecked(0.5 * (v + 1.0)) - ln_gamma_unchecked(0.5 * v)).exp()
                        / (v * std::f64::consts::PI).sqrt(),
                )
            }
        };
        MomentReport {
            order: k,
            density_bound,
            max_abs_moment_up_to_k: max_abs_moment,
            first_infinite_moment: first_infinite,
        }
    }
}

fn student_t(df: u32) -> StudentT<f64> {
    StudentT::new(f64::from(df)).expect("degrees of freedom are positive")
}

/// `E|X - 1|^j` for `X ~ Exp(1)`.
fn centered_exp_abs_moment(j: u32) -> f64 {
    // ∫_1^∞ (x-1)^j e^{-x} dx = j!/e and ∫_0^1 (1-x)^j e^{-x} dx = e^{-1} Σ_m 1/(m! (j+m+1)).
    let jf = f64::from(j);
    let upper = (ln_gamma_unchecked(jf + 1.0) - 1.0).exp();
    let mut lower = 0.0;
    let mut fact = 1.0;
    for m in 0..60 {
        if m > 0 {
            fact *= m as f64;
        }
        lower += 1.0 / (fact * (jf + m as f64 + 1.0));
    }
    upper + lower / std::f64::consts::E
}

impl fmt::Display for DesignDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for DesignDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let d = match lower.as_str() {
            "exp" | "exponential" => DesignDistribution::ExponentialCentered,
            "unif" | "uniform" => DesignDistribution::UniformSymmetric,
            "rademacher" | "bernoulli" => DesignDistribution::Rademacher,
            "gauss" | "gaussian" | "normal" => DesignDistribution::Gaussian,
            other => {
                let df = other
                    .strip_prefix('t')
                    .and_then(|rest| rest.trim_start_matches('(').trim_end_matches(')').parse::<u32>().ok())
                    .filter(|df| *df >= 1)
                    .ok_or_else(|| Error::Config(format!("unknown design distribution `{s}`")))?;
                DesignDistribution::StudentT(df)
            }
        };
        Ok(d)
    }
}

impl TryFrom<String> for DesignDistribution {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DesignDistribution> for String {
    fn from(d: DesignDistribution) -> String {
        d.name()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub order: u32,
    /// Bound on the marginal density; `None` when the law has no Lebesgue density.
    pub density_bound: Option<f64>,
    /// `max_{1 <= j <= k} E|z|^j`, infinite when some such moment diverges.
    pub max_abs_moment_up_to_k: f64,
    pub first_infinite_moment: Option<u32>,
}

impl MomentReport {
    pub fn has_density(&self) -> bool {
        self.density_bound.is_some()
    }

    pub fn moments_finite(&self) -> bool {
        self.first_infinite_moment.is_none()
    }
}

/// How `Σ` is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    /// `I + (value - 1) U U'` with `count` Haar-distributed orthonormal columns `U`.
    Spiked { value: f64, count: usize },
    /// `Σ_ij = rho^|i-j|`.
    Ar1 { rho: f64 },
    Explicit { matrix: Vec<Vec<f64>> },
}

impl Default for CovarianceSpec {
    fn default() -> Self {
        CovarianceSpec::Spiked {
            value: 400.0,
            count: 2,
        }
    }
}

impl fmt::Display for CovarianceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovarianceSpec::Spiked { value, count } => write!(f, "spiked:{value}:{count}"),
            CovarianceSpec::Ar1 { rho } => write!(f, "ar1:{rho}"),
            CovarianceSpec::Explicit { matrix } => write!(f, "explicit:{}x{}", matrix.len(), matrix.len()),
        }
    }
}

impl FromStr for CovarianceSpec {
    type Err = Error;

    /// Accepts `spiked`, `spiked:<value>:<count>`, `identity` and `ar1:<rho>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Config(format!("cannot parse covariance `{s}`"));
        match parts.as_slice() {
            ["spiked"] => Ok(CovarianceSpec::default()),
            ["spiked", v, c] => Ok(CovarianceSpec::Spiked {
                value: v.parse().map_err(|_| bad())?,
                count: c.parse().map_err(|_| bad())?,
            }),
            ["identity"] => Ok(CovarianceSpec::Spiked {
                value: 1.0,
                count: 1,
            }),
            ["ar1", rho] => Ok(CovarianceSpec::Ar1 {
                rho: rho.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum CovarianceKind {
    /// Σ = I + (value - 1) U U' with orthonormal U.
    Spiked { value: f64, factors: DMatrix<f64> },
    Dense { sigma: DMatrix<f64>, sqrt: DMatrix<f64> },
}

/// A realised covariance matrix together with its symmetric square root.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    d: usize,
    kind: CovarianceKind,
}

impl Covariance {
    /// Spiked covariance from explicit orthonormal factors.
    pub fn spiked(value: f64, factors: DMatrix<f64>) -> Result<Self> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::Config(format!("spike value must be positive, got {value}")));
        }
        let k = factors.ncols();
        let gram = factors.transpose() * &factors;
        if (gram - DMatrix::identity(k, k)).amax() > 1e-10 {
            return Err(Error::Config("spike factors must be orthonormal".into()));
        }
        Ok(Self {
            d: factors.nrows(),
            kind: CovarianceKind::Spiked { value, factors },
        })
    }

    pub fn dense(sigma: DMatrix<f64>) -> Result<Self> {
        let sqrt = sym_sqrt(&sigma)?;
        Ok(Self {
            d: sigma.nrows(),
            kind: CovarianceKind::Dense { sigma, sqrt },
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            d,
            kind: CovarianceKind::Spiked {
                value: 1.0,
                factors: DMatrix::zeros(d, 0),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `Σ B` for a `d x k` matrix `B`.
    pub fn mul(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.kind {
            CovarianceKind::Spiked { value, factors } => low_rank_update(b, factors, value - 1.0),
            CovarianceKind::Dense { sigma, .. } => sigma * b,
        }
    }

    /// `Σ^{1/2} B` for a `d x k` matrix `B`.
    pub fn sqrt_mul(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.kind {
            CovarianceKind::Spiked { value, factors } => {
                low_rank_update(b, factors, value.sqrt() - 1.0)
            }
            CovarianceKind::Dense { sqrt, .. } => sqrt * b,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.mul(&DMatrix::identity(self.d, self.d))
    }

    pub fn sqrt_dense(&self) -> DMatrix<f64> {
        self.sqrt_mul(&DMatrix::identity(self.d, self.d))
    }
}

/// `B + c U (U' B)`.
fn low_rank_update(b: &DMatrix<f64>, u: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    if u.ncols() == 0 || c == 0.0 {
        return b.clone();
    }
    let proj = u.transpose() * b;
    b + (u * proj) * c
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `d x k` matrix with orthonormal columns, distributed as the first `k`
/// columns of a Haar-random orthogonal matrix.
pub fn haar_frame<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(k <= d, "frame width {k} exceeds dimension {d}");
    if k == 0 {
        return DMatrix::zeros(d, 0);
    }
    let g = gaussian_matrix(d, k, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Haar-distributed `d x d` orthogonal matrix (QR of a Gaussian matrix with
/// the columns sign-corrected by the diagonal of the triangular factor).
pub fn haar_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    haar_frame(d, d, rng)
}

/// Realise `Σ` for dimension `d`.
pub fn build_covariance<R: Rng + ?Sized>(
    spec: &CovarianceSpec,
    d: usize,
    rng: &mut R,
) -> Result<Covariance> {
    if d == 0 {
        return Err(Error::Config("dimension d must be positive".into()));
    }
    match spec {
        CovarianceSpec::Spiked { value, count } => {
            if *count > d {
                return Err(Error::Config(format!(
                    "spike count {count} exceeds dimension {d}"
                )));
            }
            Covariance::spiked(*value, haar_frame(d, *count, rng))
        }
        CovarianceSpec::Ar1 { rho } => {
            if !(rho.abs() < 1.0) {
                return Err(Error::Config(format!("AR(1) rho must lie in (-1, 1), got {rho}")));
            }
            let sigma = DMatrix::from_fn(d, d, |i, j| rho.powi(i.abs_diff(j) as i32));
            Covariance::dense(sigma)
        }
        CovarianceSpec::Explicit { matrix } => {
            if matrix.len() != d || matrix.iter().any(|row| row.len() != d) {
                return Err(Error::Config(format!("explicit covariance must be {d}x{d}")));
            }
            let sigma = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
            Covariance::dense(sigma)
        }
    }
}

/// `d x p` matrix whose columns are the first `p` standard basis vectors.
pub fn selection_matrix(d: usize, p: usize) -> Result<DMatrix<f64>> {
    if p == 0 || p >= d {
        return Err(Error::Config(format!("selection needs 1 <= p < d, got p = {p}, d = {d}")));
    }
    Ok(DMatrix::from_fn(d, p, |i, j| if i == j { 1.0 } else { 0.0 }))
}

/// Unit vector `θ` with `M'Σθ = 0`: the normalised residual of a standard
/// Gaussian vector after projecting out the column space of `ΣM`.
pub fn null_theta<R: Rng + ?Sized>(
    cov: &Covariance,
    m: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let d = cov.dim();
    let sm = cov.mul(m);
    let qr = sm.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    if r.diagonal().iter().any(|v| v.abs() <= 1e-12 * diag_max) {
        return Err(Error::Singular("ΣM is rank deficient".into()));
    }
    let q = qr.q();
    for _ in 0..6 {
        let v = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let resid = &v - &q * (q.transpose() * &v);
        let norm = resid.norm();
        if norm >= 1e-12 {
            return Ok(resid / norm);
        }
    }
    Err(Error::Degenerate("projected null direction vanished repeatedly".into()))
}

/// `θ = c M v + theta_perp` with `c` chosen so the working model has signal
/// to noise ratio `snr_target`. Requires `M'Σ theta_perp = 0`.
pub fn calibrate_theta(
    cov: &Covariance,
    m: &DMatrix<f64>,
    theta_perp: &DVector<f64>,
    v: &DVector<f64>,
    sigma2: f64,
    snr_target: f64,
) -> Result<DVector<f64>> {
    if !(snr_target >= 0.0 && snr_target.is_finite()) {
        return Err(Error::Config(format!("snr target must be finite and >= 0, got {snr_target}")));
    }
    let mv = m * v;
    let mv_mat = DMatrix::from_column_slice(mv.len(), 1, mv.as_slice());
    let smv = cov.mul(&mv_mat);
    let signal = mv.dot(&smv.column(0));
    if !(signal > 0.0) {
        return Err(Error::Degenerate(format!("v'M'ΣMv = {signal} is not positive")));
    }
    let tp_mat = DMatrix::from_column_slice(theta_perp.len(), 1, theta_perp.as_slice());
    let noise = theta_perp.dot(&cov.mul(&tp_mat).column(0)) + sigma2;
    let c = (snr_target * noise / signal).sqrt();
    Ok(mv * c + theta_perp)
}

/// Full description of the true model and the working submodel.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub n: usize,
    pub theta: DVector<f64>,
    pub intercept: f64,
    pub mu: DVector<f64>,
    pub covariance: Covariance,
    pub rotation: DMatrix<f64>,
    pub design: DesignDistribution,
    pub noise_sd: f64,
    pub submodel: DMatrix<f64>,
}

impl ModelSpec {
    /// Model with `ϑ = 0`, `μ = 0`, selection submodel and the given pieces.
    pub fn centered(
        n: usize,
        p: usize,
        theta: DVector<f64>,
        covariance: Covariance,
        rotation: DMatrix<f64>,
        design: DesignDistribution,
        noise_sd: f64,
    ) -> Result<Self> {
        let d = covariance.dim();
        let spec = ModelSpec {
            n,
            theta,
            intercept: 0.0,
            mu: DVector::zeros(d),
            covariance,
            rotation,
            design,
            noise_sd,
            submodel: selection_matrix(d, p)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn d(&self) -> usize {
        self.covariance.dim()
    }

    pub fn p(&self) -> usize {
        self.submodel.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        let p = self.p();
        if p == 0 || p >= d {
            return Err(Error::Config(format!("need 1 <= p < d, got p = {p}, d = {d}")));
        }
        if self.n <= p + 1 {
            return Err(Error::Config(format!("need n > p + 1, got n = {}, p = {p}", self.n)));
        }
        if self.theta.len() != d || self.mu.len() != d || self.submodel.nrows() != d {
            return Err(Error::Config("θ, μ and M must have d rows".into()));
        }
        if self.rotation.shape() != (d, d) {
            return Err(Error::Config("R must be d x d".into()));
        }
        let ortho = (self.rotation.transpose() * &self.rotation - DMatrix::identity(d, d)).amax();
        if ortho > 1e-10 {
            return Err(Error::Config(format!("R is not orthogonal (deviation {ortho:e})")));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config("noise sd must be finite and >= 0".into()));
        }
        let svd = self.submodel.clone().svd(false, false);
        let smax = svd.singular_values.max();
        if svd.singular_values.min() <= 1e-12 * smax {
            return Err(Error::Singular("submodel matrix M is rank deficient".into()));
        }
        Ok(())
    }
}

/// Parameters of the working model `y = α + β'x + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateParams {
    pub intercept: f64,
    pub slope: DVector<f64>,
    /// `s² = Var(e)`.
    pub error_var: f64,
    /// `Δ = Var(β'x) / Var(e)`.
    pub snr: f64,
}

/// Population least-squares projection of `y` onto `(1, x)`.
///
/// `s² = θ'Σθ - θ'ΣM(M'ΣM)^{-1}M'Σθ + σ²`, i.e. `Var(y) - Var(β'x)`.
pub fn surrogate_params(spec: &ModelSpec) -> Result<SurrogateParams> {
    let m = &spec.submodel;
    let sm = spec.covariance.mul(m);
    let gram = m.transpose() * &sm;
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("M'ΣM is not positive definite".into()))?;
    let cross = sm.transpose() * &spec.theta;
    let slope = chol.solve(&cross);
    let theta_mat = DMatrix::from_column_slice(spec.d(), 1, spec.theta.as_slice());
    let total = spec.theta.dot(&spec.covariance.mul(&theta_mat).column(0));
    let explained = cross.dot(&slope);
    let sigma2 = spec.noise_sd * spec.noise_sd;
    let error_var = (total - explained).max(0.0) + sigma2;
    let signal = slope.dot(&(&gram * &slope)).max(0.0);
    let snr = if error_var > 0.0 {
        signal / error_var
    } else if signal == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let intercept =
        spec.intercept + spec.mu.dot(&spec.theta) - (m.transpose() * &spec.mu).dot(&slope);
    Ok(SurrogateParams {
        intercept,
        slope,
        error_var,
        snr,
    })
}

/// Everything needed to draw observations from a fixed [`ModelSpec`].
///
/// Each observation is `(x', y) = offsets + z̃' W + (0, σε)` with the
/// `d x (p+1)` weight matrix `W = R'Σ^{1/2}[M θ]` computed once.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    n: usize,
    p: usize,
    design: DesignDistribution,
    noise_sd: f64,
    weights: DMatrix<f64>,
    x_offset: DVector<f64>,
    y_offset: f64,
}

/// Scratch buffers reused across draws from one [`SamplingPlan`].
#[derive(Debug, Clone)]
pub struct SamplingWorkspace {
    latent: DMatrix<f64>,
    out: DMatrix<f64>,
    noise: Vec<f64>,
    buf: Vec<f64>,
}

impl SamplingPlan {
    pub fn new(spec: &ModelSpec) -> Self {
        let d = spec.d();
        let p = spec.p();
        let mut mt = DMatrix::zeros(d, p + 1);
        mt.columns_mut(0, p).copy_from(&spec.submodel);
        mt.set_column(p, &spec.theta);
        let weights = spec.rotation.transpose() * spec.covariance.sqrt_mul(&mt);
        Self {
            n: spec.n,
            p,
            design: spec.design,
            noise_sd: spec.noise_sd,
            weights,
            x_offset: spec.submodel.transpose() * &spec.mu,
            y_offset: spec.intercept + spec.theta.dot(&spec.mu),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.weights.nrows()
    }

    pub fn workspace(&self) -> SamplingWorkspace {
        SamplingWorkspace {
            latent: DMatrix::zeros(self.n, self.d()),
            out: DMatrix::zeros(self.n, self.p + 1),
            noise: vec![0.0; self.n],
            buf: vec![0.0; self.n * (self.p + 2)],
        }
    }

    fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, ws: &mut SamplingWorkspace) {
        self.design.fill_standardized(rng, ws.latent.as_mut_slice());
        ws.latent.mul_to(&self.weights, &mut ws.out);
        if self.noise_sd > 0.0 {
            for e in ws.noise.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *e = self.noise_sd * z;
            }
        } else {
            ws.noise.iter_mut().for_each(|e| *e = 0.0);
        }
    }

    /// Draw one dataset and return its F-statistic without materialising it.
    pub fn sample_fstat<R: Rng + ?Sized>(&self, rng: &mut R, ws: &mut SamplingWorkspace) -> f64 {
        self.draw_into(rng, ws);
        let n = self.n;
        let p = self.p;
        let buf = &mut ws.buf;
        buf[..n].fill(1.0);
        for j in 0..p {
            let off = self.x_offset[j];
            let src = ws.out.column(j);
            for (dst, s) in buf[(j + 1) * n..(j + 2) * n].iter_mut().zip(src.iter()) {
                *dst = s + off;
            }
        }
        let ycol = ws.out.column(p);
        for ((dst, s), e) in buf[(p + 1) * n..].iter_mut().zip(ycol.iter()).zip(ws.noise.iter()) {
            *dst = s + self.y_offset + e;
        }
        f_statistic_from_buffer(n, p, buf)
    }

    /// Draw one dataset together with the latent `n x d` matrix of `z̃` rows.
    pub fn sample_with_latent<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        ws: &mut SamplingWorkspace,
    ) -> (Dataset, DMatrix<f64>) {
        self.draw_into(rng, ws);
        let n = self.n;
        let p = self.p;
        let x = DMatrix::from_fn(n, p, |i, j| ws.out[(i, j)] + self.x_offset[j]);
        let y = DVector::from_fn(n, |i, _| ws.out[(i, p)] + self.y_offset + ws.noise[i]);
        (Dataset { x, y }, ws.latent.clone())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, ws: &mut SamplingWorkspace) -> Dataset {
        self.sample_with_latent(rng, ws).0
    }
}

/// Draw `n` i.i.d. observations from `spec`.
pub fn sample_dataset<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Dataset {
    let plan = SamplingPlan::new(spec);
    let mut ws = plan.workspace();
    plan.sample(rng, &mut ws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    #[test]
    fn parse_design_names() {
        for d in DesignDistribution::STUDY {
            assert_eq!(d.name().parse::<DesignDistribution>().unwrap(), d);
        }
        assert_eq!("t(3)".parse::<DesignDistribution>().unwrap(), DesignDistribution::StudentT(3));
        assert_eq!("Bernoulli".parse::<DesignDistribution>().unwrap(), DesignDistribution::Rademacher);
        assert!("cauchy".parse::<DesignDistribution>().is_err());
        assert!("t0".parse::<DesignDistribution>().is_err());
    }

    #[test]
    fn rademacher_values() {
        let mut rng = StreamKey::root(1).rng();
        let mut buf = vec![0.0; 1000];
        DesignDistribution::Rademacher.fill_standardized(&mut rng, &mut buf);
        assert!(buf.iter().all(|v| *v == 1.0 || *v == -1.0));
        let mean = buf.iter().sum::<f64>() / buf.len() as f64;
        assert!(mean.abs() < 4.0 / (buf.len() as f64).sqrt());
    }

    #[test]
    fn standardized_laws_have_unit_variance() {
        let mut rng = StreamKey::root(2).rng();
        let n = 200_000;
        for design in [
            DesignDistribution::StudentT(5),
            DesignDistribution::ExponentialCentered,
            DesignDistribution::UniformSymmetric,
            DesignDistribution::Gaussian,
        ] {
            let mut buf = vec![0.0; n];
            design.fill_standardized(&mut rng, &mut buf);
            let mean = buf.iter().sum::<f64>() / n as f64;
            let var = buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "{design}: mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "{design}: var {var}");
        }
    }

    #[test]
    fn moment_reports() {
        let u = DesignDistribution::UniformSymmetric.moment_check(20);
        assert_eq!(u.density_bound, Some(0.5));
        assert!(u.max_abs_moment_up_to_k <= 1.0);
        let t2 = DesignDistribution::StudentT(2).moment_check(2);
        assert_eq!(t2.first_infinite_moment, Some(2));
        assert!(t2.max_abs_moment_up_to_k.is_infinite());
        let t2_first = DesignDistribution::StudentT(2).moment_check(1);
        assert!(t2_first.moments_finite());
        // E|T_2| = sqrt(2)
        assert!((t2_first.max_abs_moment_up_to_k - 2f64.sqrt()).abs() < 1e-12);
        let r = DesignDistribution::Rademacher.moment_check(20);
        assert!(!r.has_density());
        assert_eq!(r.max_abs_moment_up_to_k, 1.0);
        let g = DesignDistribution::Gaussian.moment_check(4);
        assert!((g.max_abs_moment_up_to_k - 3.0).abs() < 1e-12);
        assert!((g.density_bound.unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);
        // E|Exp(1) - 1| = 2/e, E(Exp(1) - 1)^2 = 1
        let e1 = DesignDistribution::ExponentialCentered.moment_check(1);
        assert!((e1.max_abs_moment_up_to_k - 2.0 / std::f64::consts::E).abs() < 1e-12);
        let e2 = DesignDistribution::ExponentialCentered.moment_check(2);
        assert!((e2.max_abs_moment_up_to_k - 1.0).abs() < 1e-12);
        assert_eq!(e2.density_bound, Some(1.0));
    }

    #[test]
    fn haar_is_orthogonal() {
        let mut rng = StreamKey::root(3).rng();
        for d in [1, 2, 5, 30] {
            let q = haar_orthogonal(d, &mut rng);
            let dev = (q.transpose() * &q - DMatrix::identity(d, d)).amax();
            assert!(dev <= 1e-10, "d={d}: {dev}");
            assert!((q.determinant().abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn spiked_eigenvalues() {
        let mut rng = StreamKey::root(4).rng();
        let cov = build_covariance(&CovarianceSpec::default(), 50, &mut rng).unwrap();
        let mut eig: Vec<f64> = cov.to_dense().symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        assert!((eig[0] - 400.0).abs() < 1e-8 && (eig[1] - 400.0).abs() < 1e-8);
        assert!(eig[2..].iter().all(|l| (l - 1.0).abs() < 1e-8));
        let flat = build_covariance(&CovarianceSpec::Spiked { value: 1.0, count: 3 }, 6, &mut rng).unwrap();
        assert!((flat.to_dense() - DMatrix::identity(6, 6)).amax() < 1e-15);
        assert!(build_covariance(&CovarianceSpec::Spiked { value: 4.0, count: 7 }, 6, &mut rng).is_err());
    }

    #[test]
    fn ar1_definition() {
        let mut rng = StreamKey::root(5).rng();
        let cov = build_covariance(&CovarianceSpec::Ar1 { rho: 0.5 }, 3, &mut rng).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]);
        assert!((cov.to_dense() - expected).amax() < 1e-15);
        assert!(build_covariance(&CovarianceSpec::Ar1 { rho: 1.0 }, 3, &mut rng).is_err());
        let s = cov.sqrt_dense();
        assert!((&s * &s - cov.to_dense()).norm() <= 1e-8 * cov.to_dense().norm());
    }

    #[test]
    fn explicit_covariance_must_be_spd() {
        let mut rng = StreamKey::root(6).rng();
        let bad = CovarianceSpec::Explicit {
            matrix: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
        };
        assert!(build_covariance(&bad, 2, &mut rng).is_err());
        let good = CovarianceSpec::Explicit {
            matrix: vec![vec![2.0, 0.5], vec![0.5, 1.0]],
        };
        assert!(build_covariance(&good, 2, &mut rng).is_ok());
        assert!(build_covariance(&good, 3, &mut rng).is_err());
    }

    #[test]
    fn covariance_spec_parsing() {
        assert_eq!("spiked".parse::<CovarianceSpec>().unwrap(), CovarianceSpec::default());
        assert_eq!(
            "ar1:0.3".parse::<CovarianceSpec>().unwrap(),
            CovarianceSpec::Ar1 { rho: 0.3 }
        );
        assert_eq!(
            "spiked:9:1".parse::<CovarianceSpec>().unwrap(),
            CovarianceSpec::Spiked { value: 9.0, count: 1 }
        );
        assert!("ar1".parse::<CovarianceSpec>().is_err());
    }

    #[test]
    fn selection_matrix_shapes() {
        let m = selection_matrix(3, 1).unwrap();
        assert_eq!(m, DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]));
        let m = selection_matrix(4, 2).unwrap();
        assert_eq!(m.transpose() * &m, DMatrix::identity(2, 2));
        assert_eq!(m[(1, 1)], 1.0);
        assert!(selection_matrix(3, 3).is_err());
        assert!(selection_matrix(1, 1).is_err());
        assert!(selection_matrix(4, 0).is_err());
    }

    fn random_spec(seed: u64, d: usize, p: usize, noise_sd: f64) -> ModelSpec {
        let mut rng = StreamKey::root(seed).rng();
        let cov = build_covariance(&CovarianceSpec::default(), d, &mut rng).unwrap();
        let theta = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let rot = haar_orthogonal(d, &mut rng);
        ModelSpec::centered(50, p, theta, cov, rot, DesignDistribution::Gaussian, noise_sd).unwrap()
    }

    #[test]
    fn null_theta_is_orthogonal_to_sigma_m() {
        let mut rng = StreamKey::root(7).rng();
        let cov = build_covariance(&CovarianceSpec::default(), 20, &mut rng).unwrap();
        let m = selection_matrix(20, 5).unwrap();
        let theta = null_theta(&cov, &m, &mut rng).unwrap();
        assert!((theta.norm() - 1.0).abs() < 1e-12);
        let sm = cov.mul(&m);
        assert!((sm.transpose() * &theta).amax() <= 1e-8 * sm.amax());
        let rot = haar_orthogonal(20, &mut rng);
        let spec = ModelSpec::centered(50, 5, theta.clone(), cov, rot, DesignDistribution::Gaussian, 0.0).unwrap();
        let s = surrogate_params(&spec).unwrap();
        assert!(s.slope.amax() < 1e-8);
        assert!(s.snr < 1e-15);
        let theta_mat = DMatrix::from_column_slice(20, 1, theta.as_slice());
        let tst = theta.dot(&spec.covariance.mul(&theta_mat).column(0));
        assert!((s.error_var - tst).abs() < 1e-10 * tst);
    }

    #[test]
    fn correct_specification_surrogates() {
        let mut spec = random_spec(8, 10, 3, 0.7);
        let c = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        spec.theta = &spec.submodel * &c;
        let s = surrogate_params(&spec).unwrap();
        assert!((&s.slope - &c).amax() < 1e-10);
        assert!((s.error_var - 0.49).abs() < 1e-10);
        let g = spec.submodel.transpose() * spec.covariance.mul(&spec.submodel);
        let expected = c.dot(&(&g * &c)) / 0.49;
        assert!((s.snr - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn surrogates_ignore_rotation() {
        let spec = random_spec(9, 12, 4, 0.3);
        let mut other = spec.clone();
        other.rotation = haar_orthogonal(12, &mut StreamKey::root(99).rng());
        assert_eq!(surrogate_params(&spec).unwrap(), surrogate_params(&other).unwrap());
    }

    #[test]
    fn intercept_with_means() {
        let mut spec = random_spec(10, 6, 2, 0.0);
        spec.mu = DVector::from_element(6, 3.0);
        spec.intercept = 1.25;
        let s = surrogate_params(&spec).unwrap();
        let mu_m = spec.submodel.transpose() * &spec.mu;
        let expected = 1.25 + spec.mu.dot(&spec.theta) - mu_m.dot(&s.slope);
        assert!((s.intercept - expected).abs() < 1e-12);
    }

    #[test]
    fn calibrate_theta_round_trip() {
        let mut rng = StreamKey::root(11).rng();
        let d = 30;
        let p = 5;
        let cov = build_covariance(&CovarianceSpec::default(), d, &mut rng).unwrap();
        let m = selection_matrix(d, p).unwrap();
        let perp = null_theta(&cov, &m, &mut rng).unwrap();
        let v = DVector::from_element(p, 1.0);
        let rot = haar_orthogonal(d, &mut rng);
        let base = calibrate_theta(&cov, &m, &perp, &v, 0.04, 0.0).unwrap();
        assert_eq!(base, perp);
        for target in [0.01, 0.3 / 50f64.sqrt(), 0.5, 3.0] {
            let theta = calibrate_theta(&cov, &m, &perp, &v, 0.04, target).unwrap();
            let spec = ModelSpec::centered(50, p, theta, cov.clone(), rot.clone(), DesignDistribution::Gaussian, 0.2).unwrap();
            let s = surrogate_params(&spec).unwrap();
            assert!((s.snr - target).abs() <= 1e-10 * target, "{target}: {}", s.snr);
        }
        // Doubling the signal component quadruples the ratio.
        let t1 = calibrate_theta(&cov, &m, &perp, &v, 0.04, 0.2).unwrap();
        let t2 = (&t1 - &perp) * 2.0 + &perp;
        let mk = |theta| ModelSpec::centered(50, p, theta, cov.clone(), rot.clone(), DesignDistribution::Gaussian, 0.2).unwrap();
        let s1 = surrogate_params(&mk(t1)).unwrap().snr;
        let s2 = surrogate_params(&mk(t2)).unwrap().snr;
        assert!((s2 / s1 - 4.0).abs() < 1e-10);
        assert!(calibrate_theta(&cov, &m, &perp, &DVector::zeros(p), 0.04, 0.2).is_err());
    }

    #[test]
    fn spec_validation() {
        let spec = random_spec(12, 5, 2, 0.0);
        let mut bad = spec.clone();
        bad.rotation[(0, 0)] += 1e-6;
        assert!(bad.validate().is_err());
        let mut bad = spec.clone();
        bad.n = 3;
        assert!(bad.validate().is_err());
        let mut bad = spec.clone();
        bad.noise_sd = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = spec;
        bad.submodel = DMatrix::from_fn(5, 2, |i, _| if i == 0 { 1.0 } else { 0.0 });
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sample_mean_tracks_mu() {
        let mut spec = random_spec(13, 8, 3, 0.5);
        spec.mu = DVector::from_element(8, 3.0);
        spec.n = 400;
        let data = sample_dataset(&spec, &mut StreamKey::root(14).rng());
        let target = spec.submodel.transpose() * &spec.mu;
        for j in 0..3 {
            let col = data.x.column(j);
            let mean = col.mean();
            let sd = col.variance().sqrt();
            assert!((mean - target[j]).abs() < 4.0 * sd / 20.0, "col {j}: {mean}");
        }
    }

    #[test]
    fn fast_path_matches_dataset_path() {
        let spec = random_spec(15, 9, 2, 0.4);
        let plan = SamplingPlan::new(&spec);
        let mut ws = plan.workspace();
        let f_fast = plan.sample_fstat(&mut StreamKey::root(16).rng(), &mut ws);
        let data = plan.sample(&mut StreamKey::root(16).rng(), &mut ws);
        let f_slow = crate::linmodel::f_statistic(&data);
        assert_eq!(f_fast.to_bits(), f_slow.to_bits());
    }
}
