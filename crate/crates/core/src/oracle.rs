//! Exact checks by enumeration for Rademacher designs.
//!
//! For `z̃` uniform on `{-1, +1}^d` (with `d <= 20`) every conditional
//! expectation given a linear image `B'z̃` is a finite average over the atoms
//! that share the same image (a *fiber*). This module computes those
//! averages exactly and derives from them the conditional moments of the
//! working-model error, the substitute errors that standardise it, the
//! Bayes versus best-linear risk ratio, and tail probabilities of the
//! conditional-mean deviation. Gaussian designs are handled in closed form:
//! their conditional moments are exactly linear and constant.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{
    build_covariance, haar_orthogonal, null_theta, selection_matrix, surrogate_params,
    Covariance, CovarianceSpec, DesignDistribution, ModelSpec, SamplingPlan, SurrogateParams,
};
use crate::error::{Error, Result};
use crate::linmodel::{f_statistic, ks_sup_distance, sym_inv_sqrt, Dataset};
use crate::mc::median;
use crate::rng::StreamKey;
use crate::specfun::{f_cdf, FParams};

pub const MAX_ENUMERATION_DIM: usize = 20;
pub const DEFAULT_GROUPING_TOL: f64 = 1e-9;

const DOMAIN_GAP: u64 = 10;
const DOMAIN_TAIL: u64 = 11;

/// Uniform law on `{-1, +1}^d`; atom `a` has `+1` in coordinate `i` iff bit `i` of `a` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnumeratedDesign {
    d: usize,
    tolerance: f64,
}

impl EnumeratedDesign {
    pub fn rademacher(d: usize) -> Result<Self> {
        if d == 0 || d > MAX_ENUMERATION_DIM {
            return Err(Error::Config(format!(
                "enumeration needs 1 <= d <= {MAX_ENUMERATION_DIM}, got {d}"
            )));
        }
        Ok(Self {
            d,
            tolerance: DEFAULT_GROUPING_TOL,
        })
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn atom_count(&self) -> usize {
        1 << self.d
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.atom_count() as f64
    }

    #[inline]
    pub fn coord(atom: usize, i: usize) -> f64 {
        if (atom >> i) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn atom(&self, atom: usize) -> DVector<f64> {
        DVector::from_fn(self.d, |i, _| Self::coord(atom, i))
    }

    /// Index of the atom equal to `z`, if `z` is a sign vector of length `d`.
    pub fn atom_index(&self, z: &[f64]) -> Option<usize> {
        if z.len() != self.d {
            return None;
        }
        let mut a = 0usize;
        for (i, &v) in z.iter().enumerate() {
            if v == 1.0 {
                a |= 1 << i;
            } else if v != -1.0 {
                return None;
            }
        }
        Some(a)
    }
}

/// Partition of the atoms into fibers of equal `B'z̃`.
#[derive(Debug, Clone)]
pub struct Fibers {
    /// Atom indices, grouped so each fiber is a contiguous range.
    order: Vec<u32>,
    /// Fiber `f` spans `order[starts[f]..starts[f + 1]]`.
    starts: Vec<usize>,
    fiber_of: Vec<u32>,
    /// Row-major `atoms x p` images `B'z̃`.
    keys: Vec<f64>,
    p: usize,
    /// Gaps between neighbouring values that exceed rounding noise yet fall
    /// within the grouping tolerance.
    pub collisions: usize,
}

impl Fibers {
    pub fn group(design: &EnumeratedDesign, b: &DMatrix<f64>) -> Self {
        let d = design.d();
        let p = b.ncols();
        let atoms = design.atom_count();
        // B'z̃ splits into contributions of the low and high coordinate halves.
        let half = d / 2;
        let table = |bits: std::ops::Range<usize>| -> Vec<f64> {
            let width = bits.len();
            let mut t = vec![0.0; (1 << width) * p];
            for (m, row) in t.chunks_mut(p).enumerate() {
                for (k, slot) in row.iter_mut().enumerate() {
                    *slot = (0..width).map(|j| b[(bits.start + j, k)] * EnumeratedDesign::coord(m, j)).sum();
                }
            }
            t
        };
        let low = table(0..half);
        let high = table(half..d);
        let mut keys = vec![0.0; atoms * p];
        keys.par_chunks_mut(p).enumerate().for_each(|(a, key)| {
            let (lo, hi) = (a & ((1 << half) - 1), a >> half);
            for (k, slot) in key.iter_mut().enumerate() {
                *slot = low[lo * p + k] + high[hi * p + k];
            }
        });
        let mut order: Vec<u32> = (0..atoms as u32).collect();
        let mut starts = Vec::new();
        let mut collisions = 0;
        split_fibers(&keys, p, &mut order, 0, 0, design.tolerance(), &mut starts, &mut collisions);
        starts.push(atoms);
        let mut fiber_of = vec![0u32; atoms];
        for f in 0..starts.len() - 1 {
            for &a in &order[starts[f]..starts[f + 1]] {
                fiber_of[a as usize] = f as u32;
            }
        }
        Self {
            order,
            starts,
            fiber_of,
            keys,
            p,
            collisions,
        }
    }

    pub fn len(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn atoms(&self, fiber: usize) -> impl Iterator<Item = usize> + '_ {
        self.order[self.starts[fiber]..self.starts[fiber + 1]]
            .iter()
            .map(|&a| a as usize)
    }

    pub fn size(&self, fiber: usize) -> usize {
        self.starts[fiber + 1] - self.starts[fiber]
    }

    pub fn fiber_of(&self, atom: usize) -> usize {
        self.fiber_of[atom] as usize
    }

    pub fn key(&self, atom: usize) -> &[f64] {
        &self.keys[atom * self.p..(atom + 1) * self.p]
    }
}

#[allow(clippy::too_many_arguments)]
fn split_fibers(
    keys: &[f64],
    p: usize,
    idx: &mut [u32],
    coord: usize,
    offset: usize,
    tol: f64,
    starts: &mut Vec<usize>,
    collisions: &mut usize,
) {
    if coord == p || idx.len() <= 1 {
        starts.push(offset);
        return;
    }
    let mut pairs: Vec<(f64, u32)> = idx.iter().map(|&a| (keys[a as usize * p + coord], a)).collect();
    pairs.sort_unstable_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    for (slot, &(_, a)) in idx.iter_mut().zip(&pairs) {
        *slot = a;
    }
    let mut begin = 0;
    for i in 1..=idx.len() {
        let boundary = if i == idx.len() {
            true
        } else {
            let (prev, cur) = (pairs[i - 1].0, pairs[i].0);
            let gap = cur - prev;
            if gap > 1e-13 * (1.0 + cur.abs()) && gap <= tol {
                *collisions += 1;
            }
            gap > tol
        };
        if boundary {
            split_fibers(
                keys,
                p,
                &mut idx[begin..i],
                coord + 1,
                offset + begin,
                tol,
                starts,
                collisions,
            );
            begin = i;
        }
    }
}

fn check_frame(b: &DMatrix<f64>, d: usize) -> Result<()> {
    if b.nrows() != d || b.ncols() == 0 || b.ncols() > d {
        return Err(Error::Config(format!(
            "frame must be {d} x p with 1 <= p <= {d}, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    let dev = (b.transpose() * b - DMatrix::identity(b.ncols(), b.ncols())).amax();
    if dev > 1e-10 {
        return Err(Error::Config(format!("frame columns are not orthonormal (deviation {dev:e})")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FiberMoments {
    pub key: DVector<f64>,
    /// Probability of the fiber.
    pub weight: f64,
    /// `E[z̃ | B'z̃]` on the fiber.
    pub mean: DVector<f64>,
    /// `E[z̃ z̃' | B'z̃]` on the fiber.
    pub second_moment: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ConditionalMoments {
    pub fibers: Vec<FiberMoments>,
    /// `max_atoms ‖E[z̃|B'z̃] - BB'z̃‖`.
    pub max_mean_deviation: f64,
    /// `max_atoms ‖E[z̃z̃'|B'z̃] - (I - BB' + BB'z̃z̃'BB')‖` in spectral norm.
    pub max_second_moment_deviation: f64,
    pub collisions: usize,
}

/// Per-atom deviation `‖E[z̃|B'z̃] - BB'z̃‖`, indexed by atom.
pub fn mean_deviations(design: &EnumeratedDesign, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_frame(b, design.d())?;
    let fibers = Fibers::group(design, b);
    Ok(mean_deviations_grouped(design, b, &fibers))
}

fn mean_deviations_grouped(design: &EnumeratedDesign, b: &DMatrix<f64>, fibers: &Fibers) -> Vec<f64> {
    let d = design.d();
    let p = b.ncols();
    let rows: Vec<f64> = (0..d).flat_map(|i| (0..p).map(move |k| b[(i, k)])).collect();
    // BB'z̃ depends on z̃ only through B'z̃, so the deviation is constant on a fiber.
    let per_fiber: Vec<f64> = (0..fibers.len())
        .into_par_iter()
        .map(|f| {
            let size = fibers.size(f) as f64;
            let mut mean = [0.0f64; MAX_ENUMERATION_DIM];
            let mut first = usize::MAX;
            for a in fibers.atoms(f) {
                first = first.min(a);
                for (i, m) in mean[..d].iter_mut().enumerate() {
                    *m += EnumeratedDesign::coord(a, i);
                }
            }
            let key = fibers.key(first);
            (0..d)
                .map(|i| {
                    let proj: f64 = rows[i * p..(i + 1) * p].iter().zip(key).map(|(x, y)| x * y).sum();
                    (mean[i] / size - proj).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (0..design.atom_count())
        .map(|a| per_fiber[fibers.fiber_of(a)])
        .collect()
}

/// Exact conditional first and second moments of `z̃` given `B'z̃`.
///
/// Stores a `d x d` matrix per fiber, so intended for moderate `d`.
pub fn conditional_moments(design: &EnumeratedDesign, b: &DMatrix<f64>) -> Result<ConditionalMoments> {
    let d = design.d();
    check_frame(b, d)?;
    let fibers = Fibers::group(design, b);
    let bbt = b * b.transpose();
    let identity = DMatrix::<f64>::identity(d, d);
    let w = design.weight();
    let results: Vec<(FiberMoments, f64, f64)> = (0..fibers.len())
        .into_par_iter()
        .map(|f| {
            let size = fibers.size(f) as f64;
            let mut mean = DVector::zeros(d);
            let mut second = DMatrix::zeros(d, d);
            let mut first_atom = 0;
            for (i, a) in fibers.atoms(f).enumerate() {
                if i == 0 {
                    first_atom = a;
                }
                let z = design.atom(a);
                mean += &z;
                second.ger(1.0, &z, &z, 1.0);
            }
            mean /= size;
            second /= size;
            let key = DVector::from_column_slice(fibers.key(first_atom));
            let proj = b * &key;
            let mut mean_dev: f64 = 0.0;
            for a in fibers.atoms(f) {
                let z = design.atom(a);
                let bbz = &bbt * &z;
                mean_dev = mean_dev.max((&mean - bbz).norm());
            }
            let target = &identity - &bbt + &proj * proj.transpose();
            let diff = &second - target;
            let second_dev = SymmetricEigen::new(diff).eigenvalues.amax();
            (
                FiberMoments {
                    key,
                    weight: size * w,
                    mean,
                    second_moment: second,
                },
                mean_dev,
                second_dev,
            )
        })
        .collect();
    let mut out = ConditionalMoments {
        fibers: Vec::with_capacity(results.len()),
        max_mean_deviation: 0.0,
        max_second_moment_deviation: 0.0,
        collisions: fibers.collisions,
    };
    for (fm, md, sd) in results {
        out.max_mean_deviation = out.max_mean_deviation.max(md);
        out.max_second_moment_deviation = out.max_second_moment_deviation.max(sd);
        out.fibers.push(fm);
    }
    Ok(out)
}

/// Summary of the conditional-moment deviations for either design family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationSummary {
    pub max_mean_deviation: f64,
    pub max_second_moment_deviation: f64,
}

/// Rademacher designs by enumeration, Gaussian designs in closed form
/// (`E[z̃|B'z̃] = BB'z̃` and `E[z̃z̃'|B'z̃] = I - BB' + BB'z̃z̃'BB'` exactly).
pub fn deviation_summary(design: DesignDistribution, d: usize, b: &DMatrix<f64>) -> Result<DeviationSummary> {
    match design {
        DesignDistribution::Gaussian => {
            check_frame(b, d)?;
            Ok(DeviationSummary {
                max_mean_deviation: 0.0,
                max_second_moment_deviation: 0.0,
            })
        }
        DesignDistribution::Rademacher => {
            let cm = conditional_moments(&EnumeratedDesign::rademacher(d)?, b)?;
            Ok(DeviationSummary {
                max_mean_deviation: cm.max_mean_deviation,
                max_second_moment_deviation: cm.max_second_moment_deviation,
            })
        }
        other => Err(Error::Config(format!("design `{other}` is not enumerable"))),
    }
}

/// The frame `B = M̃(M̃'M̃)^{-1/2}` with `M̃ = R'Σ^{1/2}M`, together with
/// `c = (I - P_M̃) R'Σ^{1/2}θ`, so that the working-model error is
/// `e = c'z̃ + ε`.
fn standardized_frame(spec: &ModelSpec) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let rt = spec.rotation.transpose();
    let m_tilde = &rt * spec.covariance.sqrt_mul(&spec.submodel);
    let theta_mat = DMatrix::from_column_slice(spec.d(), 1, spec.theta.as_slice());
    let theta_tilde: DVector<f64> = (&rt * spec.covariance.sqrt_mul(&theta_mat)).column(0).into();
    let b = &m_tilde * sym_inv_sqrt(&(m_tilde.transpose() * &m_tilde))?;
    let c = &theta_tilde - &b * (b.transpose() * &theta_tilde);
    Ok((b, c))
}

/// Exact conditional law of the working-model error for an enumerable design.
#[derive(Debug, Clone)]
pub struct EnumeratedModel {
    design: EnumeratedDesign,
    pub frame: DMatrix<f64>,
    /// `e - ε = c'z̃`.
    pub residual_coef: DVector<f64>,
    pub fibers: Fibers,
    /// `E[c'z̃ | x]` per fiber.
    pub fiber_mean: Vec<f64>,
    /// `Var[c'z̃ | x]` per fiber.
    pub fiber_var: Vec<f64>,
    pub sigma2: f64,
    pub surrogate: SurrogateParams,
}

impl EnumeratedModel {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        if spec.design != DesignDistribution::Rademacher {
            return Err(Error::Config(format!(
                "enumeration requires a Rademacher design, got `{}`",
                spec.design
            )));
        }
        let design = EnumeratedDesign::rademacher(spec.d())?;
        let surrogate = surrogate_params(spec)?;
        let (frame, c) = standardized_frame(spec)?;
        let fibers = Fibers::group(&design, &frame);
        let d = design.d();
        let (fiber_mean, fiber_var): (Vec<f64>, Vec<f64>) = (0..fibers.len())
            .into_par_iter()
            .map(|f| {
                let size = fibers.size(f) as f64;
                let vals: Vec<f64> = fibers
                    .atoms(f)
                    .map(|a| (0..d).map(|i| c[i] * EnumeratedDesign::coord(a, i)).sum())
                    .collect();
                let mean = vals.iter().sum::<f64>() / size;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / size;
                (mean, var)
            })
            .unzip();
        Ok(Self {
            design,
            frame,
            residual_coef: c,
            fibers,
            fiber_mean,
            fiber_var,
            sigma2: spec.noise_sd * spec.noise_sd,
            surrogate,
        })
    }

    pub fn design(&self) -> &EnumeratedDesign {
        &self.design
    }

    fn fiber_weight(&self, f: usize) -> f64 {
        self.fibers.size(f) as f64 * self.design.weight()
    }

    /// `(E[e | x], Var[e | x])` on fiber `f`.
    pub fn conditional_error_moments(&self, f: usize) -> (f64, f64) {
        (self.fiber_mean[f], self.fiber_var[f] + self.sigma2)
    }

    /// `(E[Var[e|x]], Var[E[e|x]])`; they add up to `s²`.
    pub fn variance_decomposition(&self) -> (f64, f64) {
        let mut within = 0.0;
        let mut between = 0.0;
        for f in 0..self.fibers.len() {
            let w = self.fiber_weight(f);
            within += w * (self.fiber_var[f] + self.sigma2);
            between += w * self.fiber_mean[f].powi(2);
        }
        (within, between)
    }

    /// Population mean and variance of the substitute errors (atom weighted,
    /// ε integrated out), and the probability of zero-variance fibers.
    pub fn substitute_moments(&self) -> (f64, f64, f64) {
        let s = self.surrogate.error_var.sqrt();
        let d = self.design.d();
        let c = &self.residual_coef;
        let mut mean = 0.0;
        let mut second = 0.0;
        let mut excluded = 0.0;
        for f in 0..self.fibers.len() {
            let (m, v) = self.conditional_error_moments(f);
            let w = self.design.weight();
            if v <= 0.0 {
                excluded += self.fiber_weight(f);
                continue;
            }
            for a in self.fibers.atoms(f) {
                let u: f64 = (0..d).map(|i| c[i] * EnumeratedDesign::coord(a, i)).sum();
                let centered = u - m;
                mean += w * s * centered / v.sqrt();
                second += w * s * s * (centered * centered + self.sigma2) / v;
            }
        }
        (mean, second - mean * mean, excluded)
    }

    /// Exact profile of `Var[e|x] / s²`: its largest deviation from one over
    /// fibers, and its expected absolute deviation.
    pub fn conditional_variance_profile(&self) -> VarianceProfile {
        let s2 = self.surrogate.error_var;
        let mut max_dev: f64 = 0.0;
        let mut mean_dev = 0.0;
        for f in 0..self.fibers.len() {
            let dev = ((self.fiber_var[f] + self.sigma2) / s2 - 1.0).abs();
            max_dev = max_dev.max(dev);
            mean_dev += self.fiber_weight(f) * dev;
        }
        VarianceProfile {
            max_abs_deviation: max_dev,
            mean_abs_deviation: mean_dev,
        }
    }

    /// Exact `E[max_{i<=n} |Var[e_i|x_i] / s² - 1|]` over `n` independent observations.
    pub fn expected_sample_max_variance_deviation(&self, n: usize) -> f64 {
        let s2 = self.surrogate.error_var;
        let mut devs: Vec<(f64, f64)> = (0..self.fibers.len())
            .map(|f| (((self.fiber_var[f] + self.sigma2) / s2 - 1.0).abs(), self.fiber_weight(f)))
            .collect();
        devs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cdf = 0.0f64;
        let mut prev = 0.0;
        let mut expectation = 0.0;
        for (dev, w) in devs {
            cdf = (cdf + w).min(1.0);
            let cur = cdf.powi(n as i32);
            expectation += dev * (cur - prev);
            prev = cur;
        }
        expectation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceProfile {
    pub max_abs_deviation: f64,
    pub mean_abs_deviation: f64,
}

/// Conditional law of the working-model error given `x`.
#[derive(Debug, Clone)]
pub enum ErrorModel {
    Enumerated(Box<EnumeratedModel>),
    /// Gaussian design: `e` is independent of `x` with variance `s²`.
    Gaussian(SurrogateParams),
}

impl ErrorModel {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        match spec.design {
            DesignDistribution::Rademacher => Ok(ErrorModel::Enumerated(Box::new(EnumeratedModel::new(spec)?))),
            DesignDistribution::Gaussian => Ok(ErrorModel::Gaussian(surrogate_params(spec)?)),
            other => Err(Error::Config(format!("design `{other}` has no exact conditional model"))),
        }
    }

    pub fn surrogate(&self) -> &SurrogateParams {
        match self {
            ErrorModel::Enumerated(m) => &m.surrogate,
            ErrorModel::Gaussian(s) => s,
        }
    }

    /// `(E[e|x], Var[e|x])` for the observation with latent draw `z`.
    pub fn conditional_for_latent(&self, z: &[f64]) -> Result<(f64, f64)> {
        match self {
            ErrorModel::Gaussian(s) => Ok((0.0, s.error_var)),
            ErrorModel::Enumerated(m) => {
                let atom = m
                    .design
                    .atom_index(z)
                    .ok_or_else(|| Error::Config("latent row is not a sign vector".into()))?;
                Ok(m.conditional_error_moments(m.fibers.fiber_of(atom)))
            }
        }
    }

    /// `(R_N, R_L)`: risks of the Bayes and best linear predictors of `y`.
    pub fn risks(&self) -> (f64, f64) {
        match self {
            ErrorModel::Gaussian(s) => (s.error_var, s.error_var),
            ErrorModel::Enumerated(m) => (m.variance_decomposition().0, m.surrogate.error_var),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstituteErrors {
    /// Working-model errors `e_i = y_i - α - β'x_i`.
    pub errors: Vec<f64>,
    /// `e*_i`, or `None` where `Var[e_i|x_i] = 0`.
    pub substitutes: Vec<Option<f64>>,
    /// `Var[e_i | x_i]`.
    pub conditional_var: Vec<f64>,
}

impl SubstituteErrors {
    pub fn excluded(&self) -> usize {
        self.substitutes.iter().filter(|s| s.is_none()).count()
    }

    /// `max_i |Var[e_i|x_i] / s² - 1|` over the observed sample.
    pub fn max_variance_ratio_deviation(&self, s2: f64) -> f64 {
        self.conditional_var
            .iter()
            .map(|v| (v / s2 - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Substitute errors `e*_i = s (Var[e_i|x_i])^{-1/2} (e_i - E[e_i|x_i])`.
pub fn substitute_errors(model: &ErrorModel, data: &Dataset, latent: &DMatrix<f64>) -> Result<SubstituteErrors> {
    let n = data.n();
    if latent.nrows() != n {
        return Err(Error::Config("latent draws do not match the dataset".into()));
    }
    let sp = model.surrogate();
    let s2 = sp.error_var;
    let s = s2.sqrt();
    let mut errors = Vec::with_capacity(n);
    let mut substitutes = Vec::with_capacity(n);
    let mut conditional_var = Vec::with_capacity(n);
    let mut row = vec![0.0; latent.ncols()];
    for i in 0..n {
        let e = data.y[i] - sp.intercept - data.x.row(i).transpose().dot(&sp.slope);
        for (k, v) in row.iter_mut().enumerate() {
            *v = latent[(i, k)];
        }
        let (m, v) = model.conditional_for_latent(&row)?;
        errors.push(e);
        conditional_var.push(v);
        substitutes.push(if s2 == 0.0 || (m == 0.0 && v == s2) {
            Some(e)
        } else if v > 0.0 {
            Some(s * (e - m) / v.sqrt())
        } else {
            None
        });
    }
    Ok(SubstituteErrors {
        errors,
        substitutes,
        conditional_var,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskRatio {
    pub bayes_risk: f64,
    pub linear_risk: f64,
    /// `R_N / R_L`, at most one.
    pub ratio: f64,
    /// `R_L / R_N`.
    pub inverse: f64,
}

/// Prediction risk of the Bayes predictor relative to the best linear one.
pub fn risk_ratio(spec: &ModelSpec) -> Result<RiskRatio> {
    let (bayes_risk, linear_risk) = ErrorModel::new(spec)?.risks();
    let ratio = if linear_risk > 0.0 { bayes_risk / linear_risk } else { 1.0 };
    let inverse = if bayes_risk > 0.0 {
        linear_risk / bayes_risk
    } else if linear_risk > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    Ok(RiskRatio {
        bayes_risk,
        linear_risk,
        ratio,
        inverse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    pub replications: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub replications: usize,
    /// Replications dropped because too few observations remained.
    pub skipped_replications: usize,
    /// Observations dropped for a zero conditional variance.
    pub excluded_observations: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q90: f64,
    pub max: f64,
    /// KS distance of `F̂(X, Y*)` to `F_{p, n-p-1, nΔ}`.
    pub ks_substitute: f64,
    /// KS distance of `F̂(X, Y)` to the same reference.
    pub ks_original: f64,
    pub gaps: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Distribution of `|F̂(X, Y) - F̂(X, Y*)|` with `Y* = ια + Xβ + E*`.
pub fn fstat_gap_study(spec: &ModelSpec, cfg: &GapConfig) -> Result<GapSummary> {
    spec.validate()?;
    if cfg.replications == 0 {
        return Err(Error::Config("gap study needs at least one replication".into()));
    }
    let model = ErrorModel::new(spec)?;
    let plan = SamplingPlan::new(spec);
    let sp = model.surrogate().clone();
    let p = spec.p();
    let root = StreamKey::root(cfg.seed).child(DOMAIN_GAP);
    let per_rep: Vec<Result<Option<(f64, f64, f64, usize)>>> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|r| {
            let mut ws = plan.workspace();
            let (data, latent) = plan.sample_with_latent(&mut root.child(r).rng(), &mut ws);
            let sub = substitute_errors(&model, &data, &latent)?;
            let keep: Vec<usize> = (0..data.n()).filter(|&i| sub.substitutes[i].is_some()).collect();
            let dropped = data.n() - keep.len();
            if keep.len() <= p + 1 {
                return Ok(None);
            }
            let x = data.x.select_rows(keep.iter());
            let y = DVector::from_iterator(keep.len(), keep.iter().map(|&i| data.y[i]));
            // y* = α + β'x + e* = y + (e* - e), which is exactly y when e* = e.
            let y_star = DVector::from_iterator(
                keep.len(),
                keep.iter()
                    .map(|&i| data.y[i] + (sub.substitutes[i].unwrap() - sub.errors[i])),
            );
            let f_orig = f_statistic(&Dataset { x: x.clone(), y });
            let f_star = f_statistic(&Dataset { x, y: y_star });
            Ok(Some(((f_orig - f_star).abs(), f_orig, f_star, dropped)))
        })
        .collect();

    let mut gaps = Vec::new();
    let mut f_orig = Vec::new();
    let mut f_star = Vec::new();
    let mut skipped = 0;
    let mut excluded = 0;
    for item in per_rep {
        match item? {
            Some((g, fo, fs, dropped)) => {
                gaps.push(g);
                f_orig.push(fo);
                f_star.push(fs);
                excluded += dropped;
            }
            None => skipped += 1,
        }
    }
    if gaps.is_empty() {
        return Err(Error::Degenerate("every replication was excluded".into()));
    }
    let reference = FParams::new(p as u32, (spec.n - p - 1) as u32, spec.n as f64 * sp.snr)?;
    let ks_substitute = ks_sup_distance(&f_star, |t| f_cdf(t, reference))?;
    let ks_original = ks_sup_distance(&f_orig, |t| f_cdf(t, reference))?;
    let mut sorted = gaps.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(GapSummary {
        replications: cfg.replications,
        skipped_replications: skipped,
        excluded_observations: excluded,
        min: sorted[0],
        q25: quantile(&sorted, 0.25),
        median: median(&sorted),
        q75: quantile(&sorted, 0.75),
        q90: quantile(&sorted, 0.9),
        max: sorted[sorted.len() - 1],
        ks_substitute,
        ks_original,
        gaps,
    })
}

/// How the `d x p` conditioning frame is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameRecipe {
    /// First `p` standard basis vectors.
    AxisAligned,
    /// `R'Σ^{1/2}M(M'ΣM)^{-1/2}` with Haar `R`, selection `M` and `Σ` drawn from the spec.
    RotatedSubmodel { covariance: CovarianceSpec },
    /// Normalised indicators of `p` contiguous blocks (exchangeable within blocks).
    EqualBlocks,
    /// Like [`FrameRecipe::EqualBlocks`] with weight 2 on the first entry of each block.
    TiltedBlocks,
}

impl FrameRecipe {
    pub fn name(&self) -> &'static str {
        match self {
            FrameRecipe::AxisAligned => "axis",
            FrameRecipe::RotatedSubmodel { .. } => "rotated",
            FrameRecipe::EqualBlocks => "blocks",
            FrameRecipe::TiltedBlocks => "tilted",
        }
    }

    /// Whether successive frames are random draws.
    pub fn is_random(&self) -> bool {
        matches!(self, FrameRecipe::RotatedSubmodel { .. })
    }

    pub fn frame(&self, d: usize, p: usize, key: StreamKey) -> Result<DMatrix<f64>> {
        if p == 0 || p >= d {
            return Err(Error::Config(format!("frame needs 1 <= p < d, got p = {p}, d = {d}")));
        }
        match self {
            FrameRecipe::AxisAligned => selection_matrix(d, p),
            FrameRecipe::RotatedSubmodel { covariance } => {
                let mut rng = key.rng();
                let cov = build_covariance(covariance, d, &mut rng)?;
                let rot = haar_orthogonal(d, &mut rng);
                let m = selection_matrix(d, p)?;
                let m_tilde = rot.transpose() * cov.sqrt_mul(&m);
                Ok(&m_tilde * sym_inv_sqrt(&(m_tilde.transpose() * &m_tilde))?)
            }
            FrameRecipe::EqualBlocks => Ok(block_frame(d, p, 1.0)),
            FrameRecipe::TiltedBlocks => Ok(block_frame(d, p, 2.0)),
        }
    }
}

fn block_frame(d: usize, p: usize, lead: f64) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(d, p);
    let base = d / p;
    let extra = d % p;
    let mut start = 0;
    for k in 0..p {
        let len = base + usize::from(k < extra);
        for i in start..start + len {
            b[(i, k)] = if i == start { lead } else { 1.0 };
        }
        let norm = b.column(k).norm();
        b.column_mut(k).unscale_mut(norm);
        start += len;
    }
    b
}

/// Orthogonal `R` whose transpose maps the first `p` basis vectors onto the
/// columns of `frame`, so that with `Σ = I` and selection `M` the model's
/// conditioning frame `R'M` is exactly `frame`.
pub fn frame_rotation(frame: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = frame.nrows();
    let p = frame.ncols();
    check_frame(frame, d)?;
    let mut aug = DMatrix::zeros(d, p + d);
    aug.columns_mut(0, p).copy_from(frame);
    aug.columns_mut(p, d).fill_with_identity();
    let qr = aug.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.columns_mut(0, p).copy_from(frame);
    Ok(q.transpose())
}

/// Model whose conditioning frame is `frame`: `Σ = I`, selection `M`, `θ`
/// from the null construction (or `theta` when given).
pub fn frame_model(
    frame: &DMatrix<f64>,
    design: DesignDistribution,
    n: usize,
    theta: Option<DVector<f64>>,
    noise_sd: f64,
    key: StreamKey,
) -> Result<ModelSpec> {
    let d = frame.nrows();
    let p = frame.ncols();
    let cov = Covariance::identity(d);
    let m = selection_matrix(d, p)?;
    let theta = match theta {
        Some(t) => t,
        None => null_theta(&cov, &m, &mut key.rng())?,
    };
    ModelSpec::centered(n, p, theta, cov, frame_rotation(frame)?, design, noise_sd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailProbeConfig {
    pub design: DesignDistribution,
    pub recipe: FrameRecipe,
    pub p: usize,
    pub dims: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// Frames per dimension (only the first is used for deterministic recipes).
    pub frames: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailProbeRow {
    pub d: usize,
    pub t: f64,
    /// `P(‖E[z̃|B'z̃] - BB'z̃‖ > t)` per frame.
    pub probabilities: Vec<f64>,
    pub median: f64,
}

/// Exact tail probabilities of the conditional-mean deviation.
pub fn tail_probe(cfg: &TailProbeConfig) -> Result<Vec<TailProbeRow>> {
    if cfg.frames == 0 || cfg.thresholds.is_empty() || cfg.dims.is_empty() {
        return Err(Error::Config("tail probe needs frames, thresholds and dims".into()));
    }
    let frames = if cfg.recipe.is_random() { cfg.frames } else { 1 };
    let mut rows = Vec::new();
    for &d in &cfg.dims {
        let mut per_frame: Vec<Vec<f64>> = Vec::with_capacity(frames);
        for f in 0..frames as u64 {
            let key = StreamKey::root(cfg.seed).path(&[DOMAIN_TAIL, d as u64, cfg.p as u64, f]);
            let b = cfg.recipe.frame(d, cfg.p, key)?;
            let probs = match cfg.design {
                DesignDistribution::Gaussian => {
                    check_frame(&b, d)?;
                    vec![0.0; cfg.thresholds.len()]
                }
                DesignDistribution::Rademacher => {
                    let design = EnumeratedDesign::rademacher(d)?;
                    let dev = mean_deviations(&design, &b)?;
                    let w = design.weight();
                    cfg.thresholds
                        .iter()
                        .map(|&t| dev.iter().filter(|&&v| v > t).count() as f64 * w)
                        .collect()
                }
                other => return Err(Error::Config(format!("design `{other}` is not enumerable"))),
            };
            per_frame.push(probs);
        }
        for (ti, &t) in cfg.thresholds.iter().enumerate() {
            let probabilities: Vec<f64> = per_frame.iter().map(|v| v[ti]).collect();
            rows.push(TailProbeRow {
                d,
                t,
                median: median(&probabilities),
                probabilities,
            });
        }
    }
    Ok(rows)
}
