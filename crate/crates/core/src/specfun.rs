//! Scalar special functions and the reference distributions used by the
//! diagnostics: regularized incomplete beta, central and noncentral F,
//! and the standard normal.
//!
//! Everything here is a pure function of its arguments.
#![allow(clippy::excessive_precision)]

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Poisson tail mass below which the noncentral F mixture is truncated.
pub const POISSON_TAIL_TOL: f64 = 1e-12;

const LANCZOS_G: f64 = 5.242_187_5;
const LANCZOS_COEF: [f64; 14] = [
    57.156_235_665_862_923_5,
    -59.597_960_355_475_491_2,
    14.136_097_974_741_747_1,
    -0.491_913_816_097_620_199,
    0.339_946_499_848_118_887e-4,
    0.465_236_289_270_485_756e-4,
    -0.983_744_753_048_795_646e-4,
    0.158_088_703_224_912_494e-3,
    -0.210_264_441_724_104_883e-3,
    0.217_439_618_115_212_643e-3,
    -0.164_318_106_536_763_890e-3,
    0.844_182_239_838_527_433e-4,
    -0.261_908_384_015_814_087e-4,
    0.368_991_826_595_316_234e-5,
];

/// Parameters of the (possibly noncentral) F distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FParams {
    df1: u32,
    df2: u32,
    noncentrality: f64,
}

impl FParams {
    pub fn new(df1: u32, df2: u32, noncentrality: f64) -> Result<Self> {
        if df1 == 0 {
            return Err(domain("FParams", 0.0, "df1 >= 1"));
        }
        if df2 == 0 {
            return Err(domain("FParams", 0.0, "df2 >= 1"));
        }
        if !(noncentrality >= 0.0 && noncentrality.is_finite()) {
            return Err(domain("FParams", noncentrality, "finite noncentrality >= 0"));
        }
        Ok(Self {
            df1,
            df2,
            noncentrality,
        })
    }

    pub fn central(df1: u32, df2: u32) -> Result<Self> {
        Self::new(df1, df2, 0.0)
    }

    pub fn df1(&self) -> u32 {
        self.df1
    }

    pub fn df2(&self) -> u32 {
        self.df2
    }

    pub fn noncentrality(&self) -> f64 {
        self.noncentrality
    }
}

/// `log Γ(x)` for `x > 0` (Lanczos approximation, g = 671/128).
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(domain("ln_gamma", x, "finite x > 0"));
    }
    Ok(ln_gamma_unchecked(x))
}

pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    let tmp = x + LANCZOS_G;
    let tmp = (x + 0.5) * tmp.ln() - tmp;
    let mut ser = 0.999_999_999_999_997_092;
    let mut y = x;
    for c in LANCZOS_COEF {
        y += 1.0;
        ser += c / y;
    }
    tmp + (2.506_628_274_631_000_5 * ser / x).ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma_unchecked(a) + ln_gamma_unchecked(b) - ln_gamma_unchecked(a + b)
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(domain("reg_inc_beta", x, "0 <= x <= 1"));
    }
    if !(a > 0.0 && a.is_finite()) {
        return Err(domain("reg_inc_beta", a, "finite a > 0"));
    }
    if !(b > 0.0 && b.is_finite()) {
        return Err(domain("reg_inc_beta", b, "finite b > 0"));
    }
    Ok(reg_inc_beta_unchecked(x, a, b))
}

pub(crate) fn reg_inc_beta_unchecked(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    let front = ln_front.exp();
    let value = if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(x, a, b) / a
    } else {
        1.0 - front * beta_cont_frac(1.0 - x, b, a) / b
    };
    value.clamp(0.0, 1.0)
}

/// Continued fraction for the incomplete beta, modified Lentz evaluation.
fn beta_cont_frac(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// CDF of the F distribution, central or noncentral.
///
/// The noncentral case is the Poisson(λ/2) mixture of central beta CDFs
/// with numerator shape `df1/2 + j`. Summation starts at the Poisson mode,
/// walks down to `j = 0` and then up until the unvisited Poisson mass is
/// below [`POISSON_TAIL_TOL`].
pub fn f_cdf(t: f64, params: FParams) -> f64 {
    if t.is_nan() || t <= 0.0 {
        return 0.0;
    }
    if t == f64::INFINITY {
        return 1.0;
    }
    let d1 = f64::from(params.df1);
    let d2 = f64::from(params.df2);
    let x = d1 * t / (d1 * t + d2);
    let a0 = 0.5 * d1;
    let b = 0.5 * d2;
    let lambda = params.noncentrality;
    if lambda == 0.0 {
        return reg_inc_beta_unchecked(x, a0, b);
    }

    let mu = 0.5 * lambda;
    let ln_x = x.ln();
    let ln_1mx = (-x).ln_1p();
    let ln_gamma_b = ln_gamma_unchecked(b);
    // x^a (1-x)^b / (a B(a, b)), the decrement I_x(a, b) - I_x(a + 1, b).
    let term = |a: f64| -> f64 {
        (a * ln_x + b * ln_1mx + ln_gamma_unchecked(a + b)
            - ln_gamma_unchecked(a + 1.0)
            - ln_gamma_b)
            .exp()
    };

    let mode = mu.floor();
    let j0 = mode as u64;
    let w_mode = (-mu + mode * mu.ln() - ln_gamma_unchecked(mode + 1.0)).exp();
    let i_mode = reg_inc_beta_unchecked(x, a0 + mode, b);

    let mut total = w_mode * i_mode;
    let mut mass = w_mode;

    // Downward: I_x(a - 1, b) = I_x(a, b) + term(a - 1).
    let mut w = w_mode;
    let mut i_val = i_mode;
    let mut j = j0;
    while j > 0 {
        let a_prev = a0 + (j - 1) as f64;
        i_val = (i_val + term(a_prev)).min(1.0);
        w *= j as f64 / mu;
        j -= 1;
        total += w * i_val;
        mass += w;
    }

    // Upward until the remaining Poisson mass is negligible.
    let mut w = w_mode;
    let mut i_val = i_mode;
    let mut j = j0;
    let cap = j0 + 100_000;
    while 1.0 - mass >= POISSON_TAIL_TOL && j < cap {
        let a_cur = a0 + j as f64;
        i_val = (i_val - term(a_cur)).max(0.0);
        j += 1;
        w *= mu / j as f64;
        total += w * i_val;
        mass += w;
        if w == 0.0 && j as f64 > mu {
            break;
        }
    }
    total.clamp(0.0, 1.0)
}

/// Quantile of the central F distribution by doubling bracket and bisection.
pub fn f_quantile_central(q: f64, df1: u32, df2: u32) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(domain("f_quantile_central", q, "0 <= q < 1"));
    }
    let params = FParams::central(df1, df2)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while f_cdf(hi, params) < q {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Degenerate(format!(
                "f_quantile_central: no finite bracket for q = {q}"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..2_000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f_cdf(mid, params) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: rational initial guess refined by Halley steps.
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(domain("normal_quantile", q, "0 < q < 1"));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_690e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let tail = |r: f64| {
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    let mut x = if q < P_LOW {
        tail((-2.0 * q.ln()).sqrt())
    } else if q <= 1.0 - P_LOW {
        let u = q - 0.5;
        let r = u * u;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * u
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (-q).ln_1p()).sqrt())
    };

    let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
    for _ in 0..2 {
        // Work on the smaller tail so the residual keeps relative precision.
        let err = if x < 0.0 {
            normal_cdf(x) - q
        } else {
            (1.0 - q) - normal_cdf(-x)
        };
        let u = err * sqrt_2pi * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).unwrap().abs() < 1e-14);
        assert!(ln_gamma(2.0).unwrap().abs() < 1e-14);
        let half = std::f64::consts::PI.sqrt().ln();
        assert!((ln_gamma(0.5).unwrap() - half).abs() < 1e-14);
        // Γ(11) = 10!
        assert!((ln_gamma(11.0).unwrap() - 3_628_800f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_rejects_nonpositive() {
        assert!(ln_gamma(0.0).is_err());
        assert!(ln_gamma(-1.5).is_err());
        assert!(ln_gamma(f64::NAN).is_err());
        assert!(ln_gamma(f64::INFINITY).is_err());
    }

    #[test]
    fn inc_beta_endpoints_and_symmetry() {
        for &(a, b) in &[(0.5, 0.5), (1.0, 3.0), (2.5, 22.0), (40.0, 7.0)] {
            assert_eq!(reg_inc_beta(0.0, a, b).unwrap(), 0.0);
            assert_eq!(reg_inc_beta(1.0, a, b).unwrap(), 1.0);
        }
        for &a in &[0.5, 1.0, 2.5, 12.0, 150.0] {
            assert!((reg_inc_beta(0.5, a, a).unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn inc_beta_closed_forms() {
        // I_x(1, b) = 1 - (1-x)^b and I_x(a, 1) = x^a.
        for x in [0.01f64, 0.2, 0.5, 0.77, 0.99] {
            let b = 3.7;
            let expected = 1.0 - (1.0 - x).powf(b);
            let got = reg_inc_beta(x, 1.0, b).unwrap();
            assert!((got - expected).abs() <= 1e-13 * expected.max(1e-3), "{x}");
            let expected = f64::powf(x, 2.3);
            let got = reg_inc_beta(x, 2.3, 1.0).unwrap();
            assert!((got - expected).abs() <= 1e-12 * expected, "{x}");
        }
    }

    #[test]
    fn inc_beta_domain_errors() {
        assert!(reg_inc_beta(-0.1, 1.0, 1.0).is_err());
        assert!(reg_inc_beta(1.1, 1.0, 1.0).is_err());
        assert!(reg_inc_beta(0.5, 0.0, 1.0).is_err());
        assert!(reg_inc_beta(0.5, 1.0, -2.0).is_err());
    }

    #[test]
    fn f_cdf_basic() {
        let p11 = FParams::central(1, 1).unwrap();
        assert!((f_cdf(1.0, p11) - 0.5).abs() < 1e-14);
        assert_eq!(f_cdf(0.0, p11), 0.0);
        assert_eq!(f_cdf(-3.0, p11), 0.0);
        assert_eq!(f_cdf(f64::INFINITY, p11), 1.0);
    }

    #[test]
    fn f_params_validation() {
        assert!(FParams::new(0, 3, 0.0).is_err());
        assert!(FParams::new(3, 0, 0.0).is_err());
        assert!(FParams::new(3, 3, -1.0).is_err());
        assert!(FParams::new(3, 3, f64::INFINITY).is_err());
        assert!(FParams::new(3, 3, 2.0).is_ok());
    }

    #[test]
    fn noncentral_with_zero_lambda_is_central() {
        let c = FParams::central(5, 44).unwrap();
        let nc = FParams::new(5, 44, 0.0).unwrap();
        for i in 1..100 {
            let t = i as f64 * 0.05;
            assert_eq!(f_cdf(t, c), f_cdf(t, nc));
        }
    }

    #[test]
    fn noncentral_tiny_lambda_close_to_central() {
        let c = FParams::central(5, 44).unwrap();
        let nc = FParams::new(5, 44, 1e-14).unwrap();
        for i in 1..400 {
            let t = i as f64 * 0.02;
            assert!((f_cdf(t, c) - f_cdf(t, nc)).abs() <= 1e-10);
        }
    }

    #[test]
    fn noncentral_large_lambda_is_finite_and_bounded() {
        let p = FParams::new(5, 44, 900.0).unwrap();
        let v = f_cdf(150.0, p);
        assert!(v > 0.0 && v < 1.0, "{v}");
        assert!(f_cdf(1e6, p) > 1.0 - 1e-9);
    }

    #[test]
    fn quantile_edges() {
        assert_eq!(f_quantile_central(0.0, 3, 7).unwrap(), 0.0);
        assert!((f_quantile_central(0.5, 1, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!(f_quantile_central(1.0, 3, 7).is_err());
        assert!(f_quantile_central(-0.1, 3, 7).is_err());
    }

    #[test]
    fn normal_symmetry() {
        assert_eq!(normal_cdf(0.0), 0.5);
        for &x in &[0.5, 1.0, 2.0] {
            assert!((normal_cdf(-x) + normal_cdf(x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normal_quantile_domain() {
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(f64::NAN).is_err());
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
    }

    #[test]
    fn normal_round_trip() {
        let mut qs: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
        qs.extend([1e-300, 1e-100, 1e-20, 1e-8, 1.0 - 1e-8, 1.0 - 1e-12]);
        for q in qs {
            let x = normal_quantile(q).unwrap();
            assert!((normal_cdf(x) - q).abs() <= 1e-12, "q={q}");
        }
    }
}
