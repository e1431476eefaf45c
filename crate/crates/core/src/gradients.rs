//! Minibatch subsampling and stochastic gradient estimators.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PosteriorModel;

/// Indices in `1..=N`, drawn i.i.d. uniformly with replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    indices: Vec<usize>,
}

impl Minibatch {
    /// A batch with explicit indices, e.g. for exhaustive enumeration.
    pub fn from_indices(indices: Vec<usize>, n_data: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidParameter("minibatch must be non-empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i == 0 || i > n_data) {
            return Err(Error::IndexOutOfRange { index: bad, n_data });
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Redraws in place, reusing the allocation.
    pub fn redraw<R: Rng + ?Sized>(&mut self, n_data: usize, rng: &mut R) {
        for idx in self.indices.iter_mut() {
            *idx = rng.random_range(1..=n_data);
        }
    }
}

pub fn draw_minibatch<R: Rng + ?Sized>(n_data: usize, p: usize, rng: &mut R) -> Result<Minibatch> {
    if p == 0 {
        return Err(Error::InvalidParameter("minibatch size p must be >= 1".into()));
    }
    if n_data == 0 {
        return Err(Error::InvalidParameter("cannot subsample an empty dataset".into()));
    }
    let indices = (0..p).map(|_| rng.random_range(1..=n_data)).collect();
    Ok(Minibatch { indices })
}

/// Cached per-datum gradients at a control-variate center.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVariate {
    center: DVector<f64>,
    /// `grad U_i(center) = center_slopes[i - 1] * x_i` for `i` in `1..=N`;
    /// every likelihood term is a function of `x_i^T theta`.
    center_slopes: Vec<f64>,
    /// `grad U(center)`, prior included.
    center_grad_sum: DVector<f64>,
}

impl ControlVariate {
    pub fn new(model: &PosteriorModel, center: DVector<f64>) -> Result<Self> {
        let d = model.dim();
        if center.len() != d {
            return Err(Error::InvalidParameter(format!("center has dimension {}, model has {d}", center.len())));
        }
        let center_slopes = (0..model.n_data()).map(|r| model.datum_slope(r, center.as_slice())).collect();
        let center_grad_sum = model.grad_full(&center);
        Ok(Self { center, center_slopes, center_grad_sum })
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn center_grad_sum(&self) -> &DVector<f64> {
        &self.center_grad_sum
    }

    /// `grad U_i(center)` for `i` in `1..=N`.
    pub fn center_grad(&self, model: &PosteriorModel, i: usize) -> DVector<f64> {
        DVector::from_row_slice(model.dataset().row(i - 1)) * self.center_slopes[i - 1]
    }

    /// `grad U(c) + grad U_0(theta) - grad U_0(c) + (N/p) sum_{i in S} {grad U_i(theta) - grad U_i(c)}`.
    pub fn gradient(&self, model: &PosteriorModel, theta: &DVector<f64>, batch: &Minibatch) -> DVector<f64> {
        let mut out = DVector::zeros(model.dim());
        self.gradient_into(model, theta.as_slice(), batch, out.as_mut_slice());
        out
    }

    pub(crate) fn gradient_into(&self, model: &PosteriorModel, theta: &[f64], batch: &Minibatch, out: &mut [f64]) {
        let scale = model.n_data() as f64 / batch.len() as f64;
        let inv_prior = 1.0 / model.prior_variance();
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.center_grad_sum[k] + inv_prior * (theta[k] - self.center[k]);
        }
        for &i in batch.indices() {
            let row = i - 1;
            let c = scale * (model.datum_slope(row, theta) - self.center_slopes[row]);
            for (o, x) in out.iter_mut().zip(model.dataset().row(row)) {
                *o += c * x;
            }
        }
    }
}

/// Which gradient a sampler consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum GradEstimator {
    FullBatch,
    Subsampled,
    ControlVariate(ControlVariate),
}

impl GradEstimator {
    /// Evaluates the estimator. `batch` is ignored for `FullBatch`.
    pub fn evaluate(&self, model: &PosteriorModel, theta: &DVector<f64>, batch: &Minibatch) -> DVector<f64> {
        match self {
            GradEstimator::FullBatch => model.grad_full(theta),
            GradEstimator::Subsampled => sgld_gradient(model, theta, batch),
            GradEstimator::ControlVariate(cv) => cv.gradient(model, theta, batch),
        }
    }

    pub(crate) fn evaluate_into(&self, model: &PosteriorModel, theta: &[f64], batch: &Minibatch, out: &mut [f64]) {
        match self {
            GradEstimator::FullBatch => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in 0..=model.n_data() {
                    model.add_grad_datum(i, theta, 1.0, out);
                }
            }
            GradEstimator::Subsampled => sgld_gradient_into(model, theta, batch, out),
            GradEstimator::ControlVariate(cv) => cv.gradient_into(model, theta, batch, out),
        }
    }

    pub fn uses_minibatch(&self) -> bool {
        !matches!(self, GradEstimator::FullBatch)
    }
}

fn sgld_gradient_into(model: &PosteriorModel, theta: &[f64], batch: &Minibatch, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    model.add_grad_datum(0, theta, 1.0, out);
    let scale = model.n_data() as f64 / batch.len() as f64;
    for &i in batch.indices() {
        model.add_grad_datum(i, theta, scale, out);
    }
}

/// `grad U_0(theta) + (N/p) sum_{i in S} grad U_i(theta)`.
pub fn sgld_gradient(model: &PosteriorModel, theta: &DVector<f64>, batch: &Minibatch) -> DVector<f64> {
    let mut out = DVector::zeros(model.dim());
    sgld_gradient_into(model, theta.as_slice(), batch, out.as_mut_slice());
    out
}

/// Control-variate gradient. Fails unless `estimator` carries a control variate.
pub fn fp_gradient(
    model: &PosteriorModel,
    theta: &DVector<f64>,
    batch: &Minibatch,
    estimator: &GradEstimator,
) -> Result<DVector<f64>> {
    match estimator {
        GradEstimator::ControlVariate(cv) => Ok(cv.gradient(model, theta, batch)),
        _ => Err(Error::EstimatorMismatch("fp_gradient needs a control-variate estimator")),
    }
}

#[derive(Debug, Clone, Copy)]
pub enum NoiseMode<'a> {
    Sgld,
    Fp(&'a ControlVariate),
}

/// `epsilon(theta) = estimator(theta, S) - grad U(theta)`.
pub fn gradient_noise(model: &PosteriorModel, theta: &DVector<f64>, batch: &Minibatch, mode: NoiseMode<'_>) -> DVector<f64> {
    let est = match mode {
        NoiseMode::Sgld => sgld_gradient(model, theta, batch),
        NoiseMode::Fp(cv) => cv.gradient(model, theta, batch),
    };
    est - model.grad_full(theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVariance {
    pub per_coordinate: Vec<f64>,
    /// Mean of `per_coordinate` over dimensions.
    pub mean: f64,
}

/// Unbiased sample variance of the estimator's coordinates over `n_draws`
/// fresh minibatches at a fixed `theta`.
pub fn empirical_gradient_variance<R: Rng + ?Sized>(
    model: &PosteriorModel,
    theta: &DVector<f64>,
    estimator: &GradEstimator,
    p: usize,
    n_draws: usize,
    rng: &mut R,
) -> Result<GradientVariance> {
    if n_draws < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: n_draws });
    }
    let d = model.dim();
    let mut batch = draw_minibatch(model.n_data(), p, rng)?;
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    let mut g = vec![0.0; d];
    for k in 0..n_draws {
        if k > 0 {
            batch.redraw(model.n_data(), rng);
        }
        estimator.evaluate_into(model, theta.as_slice(), &batch, &mut g);
        let count = (k + 1) as f64;
        for j in 0..d {
            let delta = g[j] - mean[j];
            mean[j] += delta / count;
            m2[j] += delta * (g[j] - mean[j]);
        }
    }
    let per_coordinate: Vec<f64> = m2.iter().map(|v| v / (n_draws as f64 - 1.0)).collect();
    let mean = per_coordinate.iter().sum::<f64>() / d as f64;
    Ok(GradientVariance { per_coordinate, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dataset;
    use crate::rng::{derive_stream, StreamPurpose};
    use approx::assert_abs_diff_eq;

    fn fixture() -> PosteriorModel {
        let data = Dataset::from_rows(&[vec![1.0], vec![1.0]], vec![0.0, 1.0]).unwrap();
        PosteriorModel::linear(data, 1.0, 1.0).unwrap()
    }

    #[test]
    fn minibatch_basics() {
        let mut rng = derive_stream(1, 0, StreamPurpose::Minibatch);
        assert_eq!(draw_minibatch(1, 3, &mut rng).unwrap().indices(), &[1, 1, 1]);
        assert!(draw_minibatch(5, 0, &mut rng).is_err());

        let a = draw_minibatch(10, 50, &mut derive_stream(9, 2, StreamPurpose::Minibatch)).unwrap();
        let b = draw_minibatch(10, 50, &mut derive_stream(9, 2, StreamPurpose::Minibatch)).unwrap();
        assert_eq!(a, b);
        assert!(a.indices().iter().all(|&i| (1..=10).contains(&i)));
    }

    #[test]
    fn minibatch_frequencies() {
        let mut rng = derive_stream(3, 0, StreamPurpose::Minibatch);
        let batch = draw_minibatch(2, 100_000, &mut rng).unwrap();
        let ones = batch.indices().iter().filter(|&&i| i == 1).count() as f64 / 1e5;
        assert!((ones - 0.5).abs() < 0.01, "{ones}");
    }

    #[test]
    fn identity_batch_recovers_full_gradient() {
        let m = fixture();
        let theta = DVector::from_element(1, 0.7);
        let b = Minibatch::from_indices(vec![1, 2], 2).unwrap();
        assert_abs_diff_eq!(sgld_gradient(&m, &theta, &b)[0], m.grad_full(&theta)[0], epsilon = 1e-14);
    }

    #[test]
    fn fp_noise_vanishes_at_center() {
        let m = fixture();
        let star = m.linreg_posterior_params().unwrap().theta_star;
        let cv = ControlVariate::new(&m, star.clone()).unwrap();
        for idx in [vec![1], vec![2]] {
            let b = Minibatch::from_indices(idx, 2).unwrap();
            assert_eq!(gradient_noise(&m, &star, &b, NoiseMode::Fp(&cv)).norm(), 0.0);
        }
        let est = GradEstimator::Subsampled;
        let b = Minibatch::from_indices(vec![1], 2).unwrap();
        assert!(matches!(fp_gradient(&m, &star, &b, &est), Err(Error::EstimatorMismatch(_))));
    }

    #[test]
    fn sgld_noise_second_moment_matches_additive_term() {
        // eps at theta* is +-1 for the two singleton batches, so E[eps^2] = 1.
        let m = fixture();
        let star = m.linreg_posterior_params().unwrap().theta_star;
        let second: f64 = [1usize, 2]
            .iter()
            .map(|&i| {
                let b = Minibatch::from_indices(vec![i], 2).unwrap();
                gradient_noise(&m, &star, &b, NoiseMode::Sgld)[0].powi(2)
            })
            .sum::<f64>()
            / 2.0;
        assert_abs_diff_eq!(second, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn gradient_variance_zero_cases() {
        let m = fixture();
        let mut rng = derive_stream(5, 0, StreamPurpose::Diagnostics);
        let theta = DVector::from_element(1, 0.2);
        let v = empirical_gradient_variance(&m, &theta, &GradEstimator::FullBatch, 1, 50, &mut rng).unwrap();
        assert_eq!(v.mean, 0.0);
        let cv = ControlVariate::new(&m, theta.clone()).unwrap();
        let v = empirical_gradient_variance(&m, &theta, &GradEstimator::ControlVariate(cv), 1, 50, &mut rng).unwrap();
        assert_abs_diff_eq!(v.mean, 0.0, epsilon = 1e-28);
        assert!(empirical_gradient_variance(&m, &theta, &GradEstimator::Subsampled, 1, 1, &mut rng).is_err());
    }
}
