use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sgldfp_core::metrics::{batch_means, empirical_moments, matrix_sqrt_psd, mean_and_stderr};
use sgldfp_core::{fit_loglog_slope, w2_gaussian, GaussianSummary, MomentAccumulator};

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> GaussianSummary {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let rank_deficient = rng.random_bool(0.2);
    let mut cov = &a * a.transpose();
    if rank_deficient {
        let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        cov = &v * v.transpose();
    }
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    GaussianSummary::analytic(mean, cov).unwrap()
}

#[test]
fn gelbrich_triangle_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for t in 0..100 {
        let d = 1 + t % 4;
        let (a, b, c) = (gaussian(&mut rng, d), gaussian(&mut rng, d), gaussian(&mut rng, d));
        let ab = w2_gaussian(&a, &b).unwrap();
        let bc = w2_gaussian(&b, &c).unwrap();
        let ac = w2_gaussian(&a, &c).unwrap();
        assert!(ac <= ab + bc + 1e-8, "triple {t}: {ac} > {ab} + {bc}");
        assert_abs_diff_eq!(ab, w2_gaussian(&b, &a).unwrap(), epsilon = 1e-8);
        assert_eq!(w2_gaussian(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn one_dim_reduction_is_exact() {
    for (ma, va, mb, vb) in [(0.0, 2.0 / 5.1, 0.0, 2.1 / 5.1), (1.0, 4.0, -2.0, 0.25), (0.3, 0.0, 0.3, 9.0)] {
        let a = GaussianSummary::analytic(DVector::from_element(1, ma), DMatrix::from_element(1, 1, va)).unwrap();
        let b = GaussianSummary::analytic(DVector::from_element(1, mb), DMatrix::from_element(1, 1, vb)).unwrap();
        let expected = ((ma - mb) * (ma - mb) + (va.sqrt() - vb.sqrt()).powi(2)).sqrt();
        assert_abs_diff_eq!(w2_gaussian(&a, &b).unwrap(), expected, epsilon = 1e-15);
    }
}

#[test]
fn commuting_covariances_reduce_to_root_differences() {
    let ca = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.25]));
    let cb = DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 1.0, 0.25]));
    let a = GaussianSummary::analytic(DVector::zeros(3), ca).unwrap();
    let b = GaussianSummary::analytic(DVector::zeros(3), cb).unwrap();
    // (1-3)^2 + (2-1)^2 + 0
    assert_abs_diff_eq!(w2_gaussian(&a, &b).unwrap(), 5f64.sqrt(), epsilon = 1e-12);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let a = GaussianSummary::analytic(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
    let b = GaussianSummary::analytic(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    assert!(w2_gaussian(&a, &b).is_err());
}

#[test]
fn accumulator_matches_two_pass_and_merges() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<Vec<f64>> = (0..500).map(|_| vec![rng.sample(StandardNormal), rng.random_range(0.0..5.0)]).collect();
    let mut acc = MomentAccumulator::new(2);
    xs.iter().for_each(|x| acc.push(x));
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..2).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let cov01 = xs.iter().map(|x| (x[0] - mean[0]) * (x[1] - mean[1])).sum::<f64>() / (n - 1.0);
    let c = acc.covariance().unwrap();
    assert_abs_diff_eq!(acc.mean()[1], mean[1], epsilon = 1e-12);
    assert_abs_diff_eq!(c[(0, 1)], cov01, epsilon = 1e-12);

    let mut left = MomentAccumulator::new(2);
    let mut right = MomentAccumulator::new(2);
    xs[..123].iter().for_each(|x| left.push(x));
    xs[123..].iter().for_each(|x| right.push(x));
    left.merge(&right);
    assert_eq!(left.count(), 500);
    assert_abs_diff_eq!(left.covariance().unwrap(), c, epsilon = 1e-12);

    let s = empirical_moments(xs.iter().map(|x| x.as_slice())).unwrap();
    assert_eq!(s.n_samples, 500);
    assert_abs_diff_eq!(s.cov_matrix(), c, epsilon = 1e-12);
}

#[test]
fn loglog_fit_recovers_power_laws() {
    let pts: Vec<(f64, f64)> = [100.0, 316.0, 1000.0, 3162.0, 10000.0].iter().map(|&n: &f64| (n, 3.0 * n.powf(-1.0))).collect();
    let fit = fit_loglog_slope(&pts).unwrap();
    assert_abs_diff_eq!(fit.slope, -1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(fit.intercept, 3f64.log10(), epsilon = 1e-12);
    assert!(fit.residual < 1e-12);
    assert!(fit_loglog_slope(&[(1.0, 1.0)]).is_err());
    assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
}

#[test]
fn batch_means_on_iid_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let series: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
    let (m, se) = batch_means(&series, 100).unwrap();
    assert!(m.abs() < 4.0 * se);
    assert!((se / (1.0 / 100_000f64.sqrt()) - 1.0).abs() < 0.25);
    assert!(batch_means(&series[..3], 5).is_err());
    let (mean, err) = mean_and_stderr(&[1.0, 2.0, 3.0]);
    assert_abs_diff_eq!(mean, 2.0);
    assert_abs_diff_eq!(err, (1.0f64 / 3.0).sqrt(), epsilon = 1e-15);
    assert_eq!(mean_and_stderr(&[4.0]), (4.0, 0.0));
}

proptest! {
    #[test]
    fn psd_sqrt_squares_back(seed in 0u64..10_000, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let c = &a * a.transpose();
        let r = matrix_sqrt_psd(&c).unwrap();
        prop_assert!((&r * &r - &c).norm() < 1e-10 * c.norm().max(1.0));
        prop_assert!((&r - r.transpose()).norm() == 0.0);
        prop_assert!(r.symmetric_eigenvalues().min() >= -1e-12);
    }

    #[test]
    fn w2_translation_and_scaling(seed in 0u64..10_000, d in 1usize..4, s in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(&mut rng, d);
        let b = gaussian(&mut rng, d);
        let shift = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let base = w2_gaussian(&a, &b).unwrap();
        let ta = GaussianSummary::analytic(a.mean_vector() + &shift, a.cov_matrix()).unwrap();
        let tb = GaussianSummary::analytic(b.mean_vector() + &shift, b.cov_matrix()).unwrap();
        prop_assert!((w2_gaussian(&ta, &tb).unwrap() - base).abs() < 1e-8);
        let sa = GaussianSummary::analytic(a.mean_vector() * s, a.cov_matrix() * (s * s)).unwrap();
        let sb = GaussianSummary::analytic(b.mean_vector() * s, b.cov_matrix() * (s * s)).unwrap();
        prop_assert!((w2_gaussian(&sa, &sb).unwrap() - s * base).abs() < 1e-7 * (1.0 + s * base));
        // mean-only shift adds in quadrature
        let ma = GaussianSummary::analytic(a.mean_vector() + &shift, a.cov_matrix()).unwrap();
        let expected = shift.norm();
        prop_assert!((w2_gaussian(&ma, &a).unwrap() - expected).abs() < 1e-8);
    }
}
