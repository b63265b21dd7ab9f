use ftest_core::specfun::{
    f_cdf, f_quantile_central, ln_gamma, normal_cdf, normal_quantile, reg_inc_beta, FParams,
};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

#[test]
fn ln_gamma_matches_statrs() {
    for x in [1e-3, 0.1, 0.5, 1.0, 2.5, 7.0, 30.0, 171.5, 1e4] {
        let ours = ln_gamma(x).unwrap();
        let reference = statrs::function::gamma::ln_gamma(x);
        assert!(
            (ours - reference).abs() <= 1e-12 * reference.abs().max(1.0),
            "x = {x}: {ours} vs {reference}"
        );
    }
}

#[test]
fn inc_beta_matches_statrs() {
    for &(a, b) in &[(0.5, 0.5), (1.0, 3.0), (2.5, 22.0), (12.5, 3.0), (40.0, 60.0)] {
        for x in [0.01, 0.2, 0.5, 0.77, 0.99] {
            let ours = reg_inc_beta(x, a, b).unwrap();
            let reference = statrs::function::beta::beta_reg(a, b, x);
            assert!((ours - reference).abs() < 1e-12, "I_{x}({a}, {b}): {ours} vs {reference}");
        }
    }
}

#[test]
fn central_f_cdf_matches_statrs() {
    for &(d1, d2) in &[(1u32, 48u32), (5, 44), (25, 24), (2, 3)] {
        let reference = FisherSnedecor::new(f64::from(d1), f64::from(d2)).unwrap();
        let params = FParams::central(d1, d2).unwrap();
        for t in [0.05, 0.5, 1.0, 2.0, 4.0, 12.0] {
            let ours = f_cdf(t, params);
            assert!((ours - reference.cdf(t)).abs() < 1e-12, "F({d1}, {d2}) at {t}");
        }
    }
}

/// Smallest grid point `t = k * step` with `cdf(t) >= q`.
fn grid_quantile(q: f64, cdf: impl Fn(f64) -> f64, step: f64) -> f64 {
    let mut k = 0u64;
    while cdf(k as f64 * step) < q {
        k += 1;
    }
    k as f64 * step
}

#[test]
fn central_quantile_against_grid_scan() {
    let reference = FisherSnedecor::new(5.0, 44.0).unwrap();
    let scan = grid_quantile(0.95, |t| reference.cdf(t), 1e-4);
    let ours = f_quantile_central(0.95, 5, 44).unwrap();
    assert!(ours <= scan && ours > scan - 1e-4, "{ours} vs grid {scan}");
    assert!((ours - 2.427).abs() < 1e-3);
}

/// `erf` by its Maclaurin series, accurate for `|x| < 3`.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-18 * sum.abs() {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn normal_quantile_against_series_bisection() {
    let phi = |x: f64| 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
    let (mut lo, mut hi) = (0.0, 3.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < 0.975 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let ours = normal_quantile(0.975).unwrap();
    assert!((ours - 0.5 * (lo + hi)).abs() < 1e-10);
    assert!((normal_cdf(1.0) - phi(1.0)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn f_cdf_is_monotone_in_t(
        d1 in 1u32..40,
        d2 in 1u32..80,
        lambda in 0.0f64..30.0,
        t in 0.0f64..20.0,
        dt in 0.0f64..5.0,
    ) {
        let params = FParams::new(d1, d2, lambda).unwrap();
        let (lo, hi) = (f_cdf(t, params), f_cdf(t + dt, params));
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(hi >= lo - 1e-14);
    }

    #[test]
    fn f_cdf_decreases_in_noncentrality(
        d1 in 1u32..30,
        d2 in 2u32..80,
        lambda in 0.0f64..20.0,
        extra in 0.0f64..10.0,
        t in 0.01f64..10.0,
    ) {
        let a = f_cdf(t, FParams::new(d1, d2, lambda).unwrap());
        let b = f_cdf(t, FParams::new(d1, d2, lambda + extra).unwrap());
        prop_assert!(b <= a + 1e-12);
    }

    #[test]
    fn quantile_round_trip(q in 0.001f64..0.999, d1 in 1u32..30, d2 in 2u32..100) {
        let t = f_quantile_central(q, d1, d2).unwrap();
        let back = f_cdf(t, FParams::central(d1, d2).unwrap());
        prop_assert!((back - q).abs() < 1e-8, "q = {q}, back = {back}");
    }

    #[test]
    fn normal_quantile_round_trip(q in 1e-10f64..(1.0 - 1e-10)) {
        let x = normal_quantile(q).unwrap();
        let back = normal_cdf(x);
        prop_assert!((back - q).abs() <= 1e-12 * q.min(1.0 - q).max(1e-300) + 1e-15);
    }
}
