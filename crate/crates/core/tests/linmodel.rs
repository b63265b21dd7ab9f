use ftest_core::linmodel::{f_statistic, ks_sup_distance, ols_with_intercept, sym_inv_sqrt, sym_sqrt, Dataset};
use ftest_core::rng::StreamKey;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Coefficients from the normal equations `(A'A) b = A'y` with `A = [1 X]`.
fn normal_equations(data: &Dataset) -> DVector<f64> {
    let n = data.n();
    let mut a = DMatrix::from_element(n, data.p() + 1, 1.0);
    a.columns_mut(1, data.p()).copy_from(&data.x);
    let ata = a.transpose() * &a;
    ata.cholesky().unwrap().solve(&(a.transpose() * &data.y))
}

/// `((TSS - RSS) / p) / (RSS / (n - p - 1))` with the residuals of the normal equations.
fn rss_ratio(data: &Dataset) -> f64 {
    let (n, p) = (data.n() as f64, data.p() as f64);
    let b = normal_equations(data);
    let mut a = DMatrix::from_element(data.n(), data.p() + 1, 1.0);
    a.columns_mut(1, data.p()).copy_from(&data.x);
    let rss = (&data.y - a * b).norm_squared();
    let mean = data.y.mean();
    let tss = data.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    ((tss - rss) / p) / (rss / (n - p - 1.0))
}

fn random_dataset(n: usize, p: usize, seed: u64) -> Dataset {
    let mut rng = StreamKey::root(seed).rng();
    let x = gaussian_matrix(n, p, &mut rng);
    let y = DVector::from_fn(n, |i, _| 0.3 * x[(i, 0)] + rng.sample::<f64, _>(StandardNormal));
    Dataset::new(x, y).unwrap()
}

#[test]
fn ols_matches_normal_equations() {
    for seed in 0..20 {
        let data = random_dataset(40, 1 + (seed as usize % 6), seed);
        let fit = ols_with_intercept(&data).unwrap();
        let b = normal_equations(&data);
        assert!((fit.intercept_hat - b[0]).abs() < 1e-10);
        for k in 0..data.p() {
            assert!((fit.slope_hat[k] - b[k + 1]).abs() < 1e-10);
        }
    }
}

#[test]
fn f_statistic_matches_rss_ratio() {
    for seed in 0..20 {
        let data = random_dataset(30, 1 + (seed as usize % 8), 100 + seed);
        let f = f_statistic(&data);
        let reference = rss_ratio(&data);
        assert!((f - reference).abs() < 1e-9 * reference.max(1.0), "{f} vs {reference}");
    }
}

#[test]
fn sym_sqrt_multiplies_back() {
    let mut rng = StreamKey::root(5).rng();
    let g = gaussian_matrix(20, 25, &mut rng);
    let s = &g * g.transpose() / 25.0;
    let root = sym_sqrt(&s).unwrap();
    assert!((&root * &root - &s).amax() < 1e-10 * s.amax());
    assert!((&root - root.transpose()).amax() < 1e-12);
    let inv = sym_inv_sqrt(&s).unwrap();
    assert!((&inv * &s * &inv - DMatrix::identity(20, 20)).amax() < 1e-8);
}

#[test]
fn ks_distance_calibrated_under_the_null() {
    // sqrt(n) * KS exceeds 1.63 with probability about 0.01 under the null.
    let mut exceed = 0;
    for seed in 0..50 {
        let mut rng = StreamKey::root(seed).rng();
        let sample: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let ks = ks_sup_distance(&sample, |t| t.clamp(0.0, 1.0)).unwrap();
        if ks * (5000f64).sqrt() > 1.63 {
            exceed += 1;
        }
    }
    assert!(exceed <= 3, "{exceed} of 50 exceedances");
}

#[test]
fn ks_distance_of_large_null_sample() {
    let mut rng = StreamKey::root(77).rng();
    let sample: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
    let ks = ks_sup_distance(&sample, |t| t.clamp(0.0, 1.0)).unwrap();
    assert!(ks < 1.95 / (1e5f64).sqrt());
}

#[test]
fn gaussian_null_f_statistics_follow_central_f() {
    use ftest_core::specfun::{f_cdf, FParams};
    let mut rng = StreamKey::root(3).rng();
    let stats: Vec<f64> = (0..10_000)
        .map(|_| {
            let x = gaussian_matrix(50, 5, &mut rng);
            let y = DVector::from_fn(50, |_, _| rng.sample(StandardNormal));
            f_statistic(&Dataset::new(x, y).unwrap())
        })
        .collect();
    let reference = FParams::central(5, 44).unwrap();
    let ks = ks_sup_distance(&stats, |t| f_cdf(t, reference)).unwrap();
    assert!(ks < 0.0165, "ks = {ks}");
}

#[test]
fn ks_distance_of_exact_grid() {
    let sample = [0.1, 0.2, 0.3, 0.4];
    let ks = ks_sup_distance(&sample, |t| t).unwrap();
    assert!((ks - 0.6).abs() < 1e-15);
}

fn arb_dataset() -> impl Strategy<Value = (Dataset, u64)> {
    (8usize..40, 1usize..5, any::<u64>()).prop_filter_map("n > p + 1", |(n, p, seed)| {
        (n > p + 2).then(|| (random_dataset(n, p, seed), seed))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn anova_identity((data, _) in arb_dataset()) {
        let fit = ols_with_intercept(&data).unwrap();
        let mean = data.y.mean();
        let tss = data.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        prop_assert!((fit.model_ss + fit.rss - tss).abs() < 1e-9 * tss.max(1.0));
    }

    #[test]
    fn f_statistic_affine_invariance((data, seed) in arb_dataset()) {
        let mut rng = StreamKey::root(seed).child(1).rng();
        let (n, p) = (data.n(), data.p());
        let shift: f64 = rng.random_range(-10.0..10.0);
        let scale: f64 = rng.random_range(0.2..5.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let c = DVector::from_fn(p, |_, _| rng.random_range(-5.0..5.0));
        let a = gaussian_matrix(p, p, &mut rng) + DMatrix::identity(p, p) * 2.0;
        prop_assume!(a.determinant().abs() > 1e-3);
        let x = &data.x * &a + DMatrix::from_fn(n, p, |_, k| c[k]);
        let y = data.y.map(|v| shift + scale * v);
        let f0 = f_statistic(&data);
        let f1 = f_statistic(&Dataset::new(x, y).unwrap());
        prop_assert!((f1 - f0).abs() <= 1e-8 * f0.max(1e-300), "{f0} vs {f1}");
    }
}
