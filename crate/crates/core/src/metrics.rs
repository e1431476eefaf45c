//! Moment estimation, Gaussian (Gelbrich) Wasserstein-2 distance and
//! log-log slope fitting.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-pass mean and co-moment accumulator (Welford, with Chan's merge).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    count: usize,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
    delta: DVector<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            comoment: DMatrix::zeros(dim, dim),
            delta: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1;
        let n = self.count as f64;
        let d = self.dim();
        for k in 0..d {
            self.delta[k] = x[k] - self.mean[k];
            self.mean[k] += self.delta[k] / n;
        }
        // comoment += delta_old (x) (x - mean_new)
        for j in 0..d {
            let after = x[j] - self.mean[j];
            for i in 0..d {
                self.comoment[(i, j)] += self.delta[i] * after;
            }
        }
    }

    /// Combines two accumulators over disjoint sample sets.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.comoment += &other.comoment + &delta * delta.transpose() * (na * nb / n);
        self.mean += &delta * (nb / n);
        self.count += other.count;
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Unbiased covariance (`n - 1` denominator).
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.count < 2 {
            return Err(Error::NotEnoughSamples { needed: 2, got: self.count });
        }
        let mut c = &self.comoment / (self.count as f64 - 1.0);
        symmetrize(&mut c);
        Ok(c)
    }

    pub fn summary(&self) -> Result<GaussianSummary> {
        GaussianSummary::new(self.mean.clone(), self.covariance()?, self.count)
    }
}

fn symmetrize(c: &mut DMatrix<f64>) {
    let n = c.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
}

/// Mean and covariance of a (possibly non-Gaussian) law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    /// 0 for closed-form summaries.
    pub n_samples: usize,
}

const SYMMETRY_TOL: f64 = 1e-10;
const EIGEN_CLIP: f64 = 1e-10;

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n_samples: usize) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::InvalidParameter(format!("covariance shape {:?} for mean of length {d}", cov.shape())));
        }
        let cov = clip_psd(&cov)?;
        let mut flat = Vec::with_capacity(d * d);
        for i in 0..d {
            flat.extend(cov.row(i).iter());
        }
        Ok(Self { mean: mean.as_slice().to_vec(), cov: flat, n_samples })
    }

    pub fn analytic(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(mean, cov, 0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

/// Symmetric eigendecomposition with slightly negative eigenvalues clipped
/// to zero. Rejects asymmetric input or eigenvalues below `-1e-10 * max(lambda_max, 1)`.
fn psd_eigen(c: &DMatrix<f64>) -> Result<(SymmetricEigen<f64, nalgebra::Dyn>, bool)> {
    if !c.is_square() {
        return Err(Error::NotPsd(format!("matrix of shape {:?} is not square", c.shape())));
    }
    let scale = c.amax().max(f64::MIN_POSITIVE);
    let asym = (c - c.transpose()).amax();
    if asym > SYMMETRY_TOL * scale.max(1.0) {
        return Err(Error::NotPsd(format!("asymmetry {asym:e}")));
    }
    let mut sym = c.clone();
    symmetrize(&mut sym);
    let mut eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.max().max(0.0);
    let floor = EIGEN_CLIP * top.max(1.0);
    let mut clipped = false;
    for v in eig.eigenvalues.iter_mut() {
        if *v < -floor {
            return Err(Error::NotPsd(format!("eigenvalue {v:e}")));
        }
        if *v < 0.0 {
            log::debug!("clipping eigenvalue {v:e} to 0");
            clipped = true;
            *v = 0.0;
        }
    }
    Ok((eig, clipped))
}

/// Returns `c` symmetrized, or its clipped recomposition if any eigenvalue was clipped.
fn clip_psd(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (eig, clipped) = psd_eigen(c)?;
    let mut out = if clipped { eig.recompose() } else { c.clone() };
    symmetrize(&mut out);
    Ok(out)
}

/// Symmetric PSD square root.
pub fn matrix_sqrt_psd(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (mut eig, _) = psd_eigen(c)?;
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.sqrt());
    let mut s = eig.recompose();
    symmetrize(&mut s);
    Ok(s)
}

/// Empirical mean and unbiased covariance of a sample stream.
pub fn empirical_moments<'a, I>(samples: I) -> Result<GaussianSummary>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = samples.into_iter().peekable();
    let dim = iter.peek().map(|s| s.len()).ok_or(Error::NotEnoughSamples { needed: 2, got: 0 })?;
    let mut acc = MomentAccumulator::new(dim);
    for s in iter {
        if s.len() != dim {
            return Err(Error::InvalidParameter("samples of varying dimension".into()));
        }
        acc.push(s);
    }
    acc.summary()
}

/// Gelbrich distance between Gaussians with the given moments:
/// `W2^2 = |m_a - m_b|^2 + Tr(C_a + C_b - 2 (C_a^{1/2} C_b C_a^{1/2})^{1/2})`.
///
/// For arbitrary laws with these moments this is a lower bound on W2.
pub fn w2_gaussian(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidParameter(format!("dimension mismatch {} vs {}", a.dim(), b.dim())));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }
    let ca = a.cov_matrix();
    let cb = b.cov_matrix();
    if a.dim() == 1 {
        // avoids the cancellation in va + vb - 2 sqrt(va vb)
        let (va, vb) = (clip_psd(&ca)?[(0, 0)], clip_psd(&cb)?[(0, 0)]);
        let dm = a.mean[0] - b.mean[0];
        return Ok((dm * dm + (va.sqrt() - vb.sqrt()).powi(2)).sqrt());
    }
    let root_a = matrix_sqrt_psd(&ca)?;
    let cross = matrix_sqrt_psd(&(&root_a * &cb * &root_a))?;
    let mean_sq = (a.mean_vector() - b.mean_vector()).norm_squared();
    let bures = (ca.trace() + cb.trace() - 2.0 * cross.trace()).max(0.0);
    Ok((mean_sq + bures).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log10 units.
    pub residual: f64,
}

/// Ordinary least squares of `log10 y` on `log10 x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: points.len() });
    }
    if let Some(&(x, y)) = points.iter().find(|&&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(Error::InvalidParameter(format!("log-log fit needs positive finite values, got ({x}, {y})")));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.log10(), y.log10())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("all x values are equal".into()));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Ok(LogLogFit { slope, intercept, residual: (rss / n).sqrt() })
}

/// Mean of a correlated series and its batch-means standard error over
/// `n_batches` contiguous batches (a trailing remainder is dropped).
pub fn batch_means(series: &[f64], n_batches: usize) -> Result<(f64, f64)> {
    if n_batches < 2 || series.len() < n_batches {
        return Err(Error::NotEnoughSamples { needed: n_batches.max(2), got: series.len() });
    }
    let len = series.len() / n_batches;
    let means: Vec<f64> = series
        .chunks_exact(len)
        .take(n_batches)
        .map(|c| c.iter().sum::<f64>() / len as f64)
        .collect();
    let b = n_batches as f64;
    let mean = means.iter().sum::<f64>() / b;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (b - 1.0);
    Ok((mean, (var / b).sqrt()))
}

/// Sample mean and standard error of independent values (0 error for one value).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn g1(mean: f64, var: f64) -> GaussianSummary {
        GaussianSummary::analytic(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
    }

    #[test]
    fn constant_and_two_point_moments() {
        let s = vec![[2.0, -1.0]; 10];
        let m = empirical_moments(s.iter().map(|v| &v[..])).unwrap();
        assert_eq!(m.mean, vec![2.0, -1.0]);
        assert!(m.cov.iter().all(|&v| v == 0.0));

        let a = [1.0, 3.0];
        let b = [2.0, -1.0];
        let m = empirical_moments([&a[..], &b[..]]).unwrap();
        // (a - b)(a - b)^T / 2
        assert_abs_diff_eq!(m.cov[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.cov[1], -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.cov[3], 8.0, epsilon = 1e-15);

        assert!(empirical_moments([&a[..]]).is_err());
    }

    #[test]
    fn merge_matches_single_pass() {
        let xs: Vec<[f64; 2]> = (0..57).map(|i| [(i as f64 * 0.37).sin(), (i as f64).sqrt()]).collect();
        let mut whole = MomentAccumulator::new(2);
        let mut left = MomentAccumulator::new(2);
        let mut right = MomentAccumulator::new(2);
        for (i, x) in xs.iter().enumerate() {
            whole.push(x);
            if i < 20 { left.push(x) } else { right.push(x) }
        }
        left.merge(&right);
        assert_eq!(left.count(), whole.count());
        assert!((left.covariance().unwrap() - whole.covariance().unwrap()).amax() < 1e-12);
        assert!((left.mean() - whole.mean()).amax() < 1e-14);
    }

    #[test]
    fn sqrt_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&id).unwrap() - &id).amax() < 1e-15);
        let s = matrix_sqrt_psd(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s[(1, 1)], 3.0, epsilon = 1e-14);
        assert!(matrix_sqrt_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(matrix_sqrt_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
    }

    #[test]
    fn w2_one_dimensional() {
        assert_eq!(w2_gaussian(&g1(0.3, 2.0), &g1(0.3, 2.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(w2_gaussian(&g1(0.0, 4.0), &g1(0.0, 9.0)).unwrap(), 1.0, epsilon = 1e-14);
        let w = w2_gaussian(&g1(1.0 / 3.0, 2.1 / 5.1), &g1(1.0 / 3.0, 2.0 / 5.1)).unwrap();
        assert_abs_diff_eq!(w, (2.1f64 / 5.1).sqrt() - (2.0f64 / 5.1).sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(w, 0.015464656834598, epsilon = 1e-14);
    }

    #[test]
    fn slope_examples() {
        let sq: Vec<(f64, f64)> = [1.0, 3.0, 10.0, 40.0].iter().map(|&x| (x, 2.5 * x * x)).collect();
        assert_abs_diff_eq!(fit_loglog_slope(&sq).unwrap().slope, 2.0, epsilon = 1e-12);
        let inv: Vec<(f64, f64)> = [1.0, 3.0, 10.0, 40.0].iter().map(|&x| (x, 0.7 / x)).collect();
        assert_abs_diff_eq!(fit_loglog_slope(&inv).unwrap().slope, -1.0, epsilon = 1e-12);
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0)]).is_err());
    }
}
