//! Dense linear algebra for the working regression: symmetric square
//! roots, Householder least squares with an intercept, the F-statistic for
//! `H0: β = 0`, and the Kolmogorov-Smirnov sup-distance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative threshold on the diagonal of the triangular factor.
pub const RANK_TOL: f64 = 1e-12;

/// Residual sums of squares at or below this multiple of `‖Y‖²` count as
/// exact fits (the F-statistic is then defined to be zero).
const EXACT_FIT_TOL: f64 = (64.0 * f64::EPSILON) * (64.0 * f64::EPSILON);

/// `n` observations of `p` regressors and one response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Config(format!(
                "dataset needs n >= 1 and p >= 1, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if x.nrows() != y.len() {
            return Err(Error::Config(format!(
                "X has {} rows but Y has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset contains non-finite values".into()));
        }
        Ok(Self { x, y })
    }

    /// Single-regressor convenience constructor.
    pub fn simple(x: &[f64], y: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_column_slice(x.len(), 1, x),
            DVector::from_column_slice(y),
        )
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Column-major `[ι X Y]` buffer consumed by the QR kernel.
    fn augmented(&self) -> Vec<f64> {
        let n = self.n();
        let mut buf = Vec::with_capacity(n * (self.p() + 2));
        buf.extend(std::iter::repeat_n(1.0, n));
        buf.extend_from_slice(self.x.as_slice());
        buf.extend_from_slice(self.y.as_slice());
        buf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub intercept_hat: f64,
    pub slope_hat: DVector<f64>,
    pub rss: f64,
    pub model_ss: f64,
}

impl OlsFit {
    /// `ŝ² = RSS / (n - p - 1)`, or `None` without residual degrees of freedom.
    pub fn sigma2_hat(&self, n: usize) -> Option<f64> {
        let p = self.slope_hat.len();
        (n > p + 1).then(|| self.rss / (n - p - 1) as f64)
    }
}

/// Outcome of triangularising `[ι X]` and rotating `Y` alongside.
pub(crate) struct QrSummary {
    pub full_rank: bool,
    /// Sum of squared rotated responses in coordinates 1..=p.
    pub model_ss: f64,
    pub rss: f64,
    pub y_norm2: f64,
}

/// Householder QR of the column-major `n x (p + 2)` buffer `[ι X Y]`.
///
/// The first `p + 1` columns are triangularised in place and every
/// reflection is applied to the trailing response column. On return the
/// upper `(p+1) x (p+1)` block holds `R` and the last column holds `Q'Y`.
pub(crate) fn householder_ls(n: usize, p: usize, buf: &mut [f64]) -> QrSummary {
    let k_cols = p + 1;
    debug_assert_eq!(buf.len(), n * (p + 2));
    let y_off = k_cols * n;
    let y_norm2: f64 = buf[y_off..y_off + n].iter().map(|v| v * v).sum();
    let mut full_rank = n >= k_cols;

    for k in 0..k_cols.min(n) {
        let (head, tail) = buf.split_at_mut((k + 1) * n);
        let col = &mut head[k * n..];
        let col_norm2_full: f64 = col.iter().map(|v| v * v).sum();
        let sub = &mut col[k..];
        let norm2: f64 = sub.iter().map(|v| v * v).sum();
        let norm = norm2.sqrt();
        if norm <= RANK_TOL * col_norm2_full.sqrt() || norm == 0.0 {
            full_rank = false;
            continue;
        }
        let x0 = sub[0];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        sub[0] = x0 - alpha;
        let v_norm2 = norm2 - x0 * x0 + sub[0] * sub[0];
        let scale = 2.0 / v_norm2;
        for c in 0..(k_cols + 1 - (k + 1)) {
            let other = &mut tail[c * n + k..(c + 1) * n];
            let s: f64 = sub.iter().zip(other.iter()).map(|(a, b)| a * b).sum();
            let f = s * scale;
            for (o, v) in other.iter_mut().zip(sub.iter()) {
                *o -= f * v;
            }
        }
        sub[0] = alpha;
        for v in sub[1..].iter_mut() {
            *v = 0.0;
        }
    }
    if n < k_cols {
        full_rank = false;
    }

    let qty = &buf[y_off..y_off + n];
    let upto = k_cols.min(n);
    let model_ss: f64 = qty[1.min(upto)..upto].iter().map(|v| v * v).sum();
    let rss: f64 = qty[upto..].iter().map(|v| v * v).sum();
    QrSummary {
        full_rank,
        model_ss,
        rss,
        y_norm2,
    }
}

/// F-statistic from a prepared `[ι X Y]` buffer (clobbered).
pub(crate) fn f_statistic_from_buffer(n: usize, p: usize, buf: &mut [f64]) -> f64 {
    if n <= p + 1 {
        return 0.0;
    }
    let qr = householder_ls(n, p, buf);
    if !qr.full_rank {
        return 0.0;
    }
    if qr.rss <= EXACT_FIT_TOL * qr.y_norm2 || qr.rss <= 0.0 {
        return 0.0;
    }
    let s2 = qr.rss / (n - p - 1) as f64;
    let f = qr.model_ss / (p as f64 * s2);
    if f.is_finite() {
        f
    } else {
        0.0
    }
}

/// OLS of `Y` on `[ι X]` through Householder QR.
pub fn ols_with_intercept(data: &Dataset) -> Result<OlsFit> {
    let (n, p) = (data.n(), data.p());
    if n <= p {
        return Err(Error::Singular(format!("n = {n} must exceed p = {p}")));
    }
    let mut buf = data.augmented();
    let qr = householder_ls(n, p, &mut buf);
    if !qr.full_rank {
        return Err(Error::Singular(
            "[ι X] is numerically rank deficient".into(),
        ));
    }
    let k = p + 1;
    let y_off = k * n;
    let mut coef = vec![0.0; k];
    for i in (0..k).rev() {
        let mut acc = buf[y_off + i];
        for (j, c) in coef.iter().enumerate().skip(i + 1) {
            acc -= buf[j * n + i] * c;
        }
        coef[i] = acc / buf[i * n + i];
    }
    Ok(OlsFit {
        intercept_hat: coef[0],
        slope_hat: DVector::from_column_slice(&coef[1..]),
        rss: qr.rss,
        model_ss: qr.model_ss,
    })
}

/// The usual F-statistic for `H0: β = 0`; zero when the numerator is not
/// well defined or the residual variance estimate is not positive.
pub fn f_statistic(data: &Dataset) -> f64 {
    let (n, p) = (data.n(), data.p());
    let mut buf = data.augmented();
    f_statistic_from_buffer(n, p, &mut buf)
}

/// Symmetric positive definite square root via eigendecomposition.
pub fn sym_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (eig, _) = checked_eigen(s)?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    let t = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok(symmetrize(t))
}

/// Inverse of the symmetric square root (used to orthonormalise frames).
pub fn sym_inv_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (eig, _) = checked_eigen(s)?;
    let roots = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let v = &eig.eigenvectors;
    Ok(symmetrize(v * DMatrix::from_diagonal(&roots) * v.transpose()))
}

pub(crate) fn checked_eigen(s: &DMatrix<f64>) -> Result<(SymmetricEigen<f64, nalgebra::Dyn>, f64)> {
    if !s.is_square() || s.nrows() == 0 {
        return Err(Error::NotPositiveDefinite(format!(
            "expected a nonempty square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let asym = (s - s.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::NotPositiveDefinite(format!(
            "asymmetry {asym:e} exceeds tolerance"
        )));
    }
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::NotPositiveDefinite(format!(
            "eigenvalue range [{min:e}, {max:e}]"
        )));
    }
    Ok((eig, min))
}

fn symmetrize(t: DMatrix<f64>) -> DMatrix<f64> {
    (&t + t.transpose()) * 0.5
}

/// `sup_t |F_N(t) - cdf(t)|` for the empirical CDF `F_N` of `sample`.
pub fn ks_sup_distance<F>(sample: &[f64], cdf: F) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    if sample.iter().any(|v| v.is_nan()) {
        return Err(Error::Config("sample contains NaN".into()));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let d = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            let upper = (i + 1) as f64 / n - c;
            let lower = c - i as f64 / n;
            upper.max(lower)
        })
        .fold(0.0, f64::max);
    Ok(d.clamp(0.0, 1.0))
}
