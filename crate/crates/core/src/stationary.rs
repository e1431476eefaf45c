//! Closed-form stationary moments.
//!
//! Linear maps on d x d matrices are stored as dense d^2 x d^2 matrices
//! acting on column-major `vec`, so `vec(A Q B) = (B^T kron A) vec(Q)`.
//! `A1 (x) A2` below always means the map `Q -> A1 Q A2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelKind, PosteriorModel};
use crate::samplers::SamplerKind;

/// Gradient-norm tolerance used when an operation needs the mode itself.
pub const MODE_TOL: f64 = 1e-10;
const MODE_MAX_ITERS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorTag {
    L,
    H,
    G,
    T,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KronOperator {
    mat: DMatrix<f64>,
    tag: OperatorTag,
    dim: usize,
}

impl KronOperator {
    pub fn from_matrix(mat: DMatrix<f64>, tag: OperatorTag) -> Result<Self> {
        let n = mat.nrows();
        let dim = (n as f64).sqrt().round() as usize;
        if mat.ncols() != n || dim * dim != n || dim == 0 {
            return Err(Error::InvalidParameter(format!("operator matrix {}x{} is not d^2 x d^2", n, mat.ncols())));
        }
        Ok(Self { mat, tag, dim })
    }

    /// The map `Q -> A Q B`.
    pub fn sandwich(a: &DMatrix<f64>, b: &DMatrix<f64>, tag: OperatorTag) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.nrows() != d || b.ncols() != d {
            return Err(Error::InvalidParameter("sandwich factors must be square of equal size".into()));
        }
        Ok(Self { mat: b.transpose().kronecker(a), tag, dim: d })
    }

    pub fn zeros(dim: usize, tag: OperatorTag) -> Self {
        Self { mat: DMatrix::zeros(dim * dim, dim * dim), tag, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tag(&self) -> OperatorTag {
        self.tag
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    /// `self + scale * other`, retagged.
    pub fn add_scaled(&self, scale: f64, other: &KronOperator, tag: OperatorTag) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::InvalidParameter("operator dimensions differ".into()));
        }
        Ok(Self { mat: &self.mat + &other.mat * scale, tag, dim: self.dim })
    }

    pub fn apply(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let v = &self.mat * DVector::from_column_slice(q.as_slice());
        DMatrix::from_column_slice(self.dim, self.dim, v.as_slice())
    }

    /// Solves `op(X) = R` on all of R^{d x d} by LU.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let v = DVector::from_column_slice(rhs.as_slice());
        let x = self
            .mat
            .clone()
            .lu()
            .solve(&v)
            .ok_or_else(|| Error::Singular(format!("{:?} operator", self.tag)))?;
        Ok(DMatrix::from_column_slice(self.dim, self.dim, x.as_slice()))
    }

    /// Solves `op(X) = R` for symmetric `R` inside the symmetric subspace,
    /// which every operator built here preserves.
    pub fn solve_symmetric(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = symmetric_basis(self.dim);
        let reduced = p.transpose() * &self.mat * &p;
        let b = p.transpose() * DVector::from_column_slice(rhs.as_slice());
        let x = reduced
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Singular(format!("{:?} operator on symmetric matrices", self.tag)))?;
        let v = &p * x;
        let out = DMatrix::from_column_slice(self.dim, self.dim, v.as_slice());
        Ok((&out + out.transpose()) * 0.5)
    }

    /// Smallest eigenvalue of the (symmetrized) restriction to symmetric matrices.
    pub fn min_symmetric_eigenvalue(&self) -> f64 {
        let reduced = self.restricted();
        let sym = (&reduced + reduced.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    fn restricted(&self) -> DMatrix<f64> {
        let p = symmetric_basis(self.dim);
        p.transpose() * &self.mat * &p
    }

    fn ensure_positive(self, name: &str) -> Result<Self> {
        let min = self.min_symmetric_eigenvalue();
        if min > 0.0 {
            Ok(self)
        } else {
            Err(Error::OperatorNotPositive { name: name.into(), min_eigenvalue: min })
        }
    }
}

/// Orthonormal basis of vec(symmetric d x d), as columns of a d^2 x d(d+1)/2 matrix.
fn symmetric_basis(d: usize) -> DMatrix<f64> {
    let s = d * (d + 1) / 2;
    let mut p = DMatrix::zeros(d * d, s);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut col = 0;
    for j in 0..d {
        for i in 0..=j {
            if i == j {
                p[(i + j * d, col)] = 1.0;
            } else {
                p[(i + j * d, col)] = h;
                p[(j + i * d, col)] = h;
            }
            col += 1;
        }
    }
    p
}

fn check_square_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidParameter(format!("{what} must be square and non-empty")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::InvalidParameter(format!("{what} is not symmetric")));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::StepSizeOutOfRange(format!("gamma must be positive, got {gamma}")))
    }
}

/// `H = S (x) I + I (x) S - gamma S (x) S` for the Hessian `S`.
/// Fails when `H` is not positive on symmetric matrices.
pub fn build_h(hessian: &DMatrix<f64>, gamma: f64) -> Result<KronOperator> {
    check_square_symmetric(hessian, "hessian")?;
    check_gamma(gamma)?;
    lyapunov_part(hessian, gamma).ensure_positive("H")
}

fn lyapunov_part(hessian: &DMatrix<f64>, gamma: f64) -> KronOperator {
    let d = hessian.nrows();
    let id = DMatrix::identity(d, d);
    let mat = id.kronecker(hessian) + hessian.transpose().kronecker(&id) - hessian.transpose().kronecker(hessian) * gamma;
    KronOperator { mat, tag: OperatorTag::H, dim: d }
}

/// `(N/p) sum_i B_i (x) B_i` with `B_i = H_i - mean_j H_j`.
fn centered_square_sum(mats: &[DMatrix<f64>], p: usize, tag: OperatorTag) -> Result<KronOperator> {
    if mats.is_empty() {
        return Err(Error::InvalidDataset("need at least one per-datum matrix".into()));
    }
    if p == 0 {
        return Err(Error::InvalidParameter("minibatch size p must be >= 1".into()));
    }
    let d = mats[0].nrows();
    let n = mats.len() as f64;
    let mut mean = DMatrix::zeros(d, d);
    for m in mats {
        check_square_symmetric(m, "per-datum matrix")?;
        if m.nrows() != d {
            return Err(Error::InvalidParameter("per-datum matrices differ in size".into()));
        }
        mean += m;
    }
    mean /= n;
    let mut mat = DMatrix::zeros(d * d, d * d);
    for m in mats {
        let b = m - &mean;
        mat += b.transpose().kronecker(&b);
    }
    mat *= n / p as f64;
    Ok(KronOperator { mat, tag, dim: d })
}

/// Multiplicative-noise operator from the per-datum Hessians at the mode.
pub fn build_l(per_datum_hessians: &[DMatrix<f64>], p: usize) -> Result<KronOperator> {
    centered_square_sum(per_datum_hessians, p, OperatorTag::L)
}

/// Per-datum likelihood Hessians `i = 1..=N` at `theta`.
pub fn per_datum_hessians(model: &PosteriorModel, theta: &DVector<f64>) -> Vec<DMatrix<f64>> {
    (1..=model.n_data())
        .map(|i| model.hessian_datum(i, theta).expect("index in range"))
        .collect()
}

pub fn build_l_for_model(model: &PosteriorModel, theta_star: &DVector<f64>, p: usize) -> Result<KronOperator> {
    build_l(&per_datum_hessians(model, theta_star), p)
}

/// `G = H - gamma L`. Fails when `G` is not positive on symmetric matrices.
pub fn build_g(hessian: &DMatrix<f64>, l_op: &KronOperator, gamma: f64) -> Result<KronOperator> {
    check_square_symmetric(hessian, "hessian")?;
    check_gamma(gamma)?;
    if l_op.dim != hessian.nrows() {
        return Err(Error::InvalidParameter("L and hessian dimensions differ".into()));
    }
    lyapunov_part(hessian, gamma).add_scaled(-gamma, l_op, OperatorTag::G)?.ensure_positive("G")
}

/// Linear-regression noise operator with
/// `B_i = x_i x_i^T / s_y^2 + I / (N s_t^2) - Sigma / N`.
pub fn build_t(model: &PosteriorModel, p: usize) -> Result<KronOperator> {
    let (noise_var, prior_var) = match model.kind() {
        ModelKind::LinearRegression { noise_variance, prior_variance } => (noise_variance, prior_variance),
        _ => return Err(Error::WrongModelKind { expected: "linear_regression" }),
    };
    let post = model.linreg_posterior_params()?;
    let ds = model.dataset();
    let n = ds.n_data() as f64;
    let d = ds.dim();
    let shift = DMatrix::identity(d, d) / (n * prior_var) - &post.sigma / n;
    let mats: Vec<DMatrix<f64>> = (0..ds.n_data())
        .map(|r| {
            let x = DVector::from_column_slice(ds.row(r));
            &x * x.transpose() / noise_var + &shift
        })
        .collect();
    if p == 0 {
        return Err(Error::InvalidParameter("minibatch size p must be >= 1".into()));
    }
    let mut mat = DMatrix::zeros(d * d, d * d);
    for b in &mats {
        mat += b.transpose().kronecker(b);
    }
    Ok(KronOperator { mat: mat * (n / p as f64), tag: OperatorTag::T, dim: d })
}

/// Largest `r^2` with `L(A) <= r^2 S A S` on symmetric `A`, for Hessian `S`.
pub fn r_squared(l_op: &KronOperator, hessian: &DMatrix<f64>) -> Result<f64> {
    check_square_symmetric(hessian, "hessian")?;
    let s2 = KronOperator::sandwich(hessian, hessian, OperatorTag::Custom)?.restricted();
    let l = l_op.restricted();
    let chol = nalgebra::Cholesky::new((&s2 + s2.transpose()) * 0.5).ok_or_else(|| Error::NotPsd("hessian square".into()))?;
    let c_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::Singular("Cholesky factor".into()))?;
    let w = &c_inv * l * c_inv.transpose();
    let w = (&w + w.transpose()) * 0.5;
    Ok(w.symmetric_eigenvalues().max().max(0.0))
}

/// `M = sum_i (g_i - mean_j g_j)(g_i - mean_j g_j)^T` with `g_i` the
/// likelihood gradients at `theta_star`.
pub fn build_m(model: &PosteriorModel, theta_star: &DVector<f64>) -> Result<DMatrix<f64>> {
    if theta_star.len() != model.dim() {
        return Err(Error::InvalidParameter("theta_star has wrong dimension".into()));
    }
    let grads: Vec<DVector<f64>> = (1..=model.n_data())
        .map(|i| model.grad_datum(i, theta_star))
        .collect::<Result<_>>()?;
    let d = model.dim();
    let mean = grads.iter().fold(DVector::zeros(d), |acc, g| acc + g) / grads.len() as f64;
    let mut m = DMatrix::zeros(d, d);
    for g in &grads {
        let c = g - &mean;
        m += &c * c.transpose();
    }
    Ok(m)
}

/// Exact stationary covariance of `kind` for Bayesian linear regression.
/// `additive` is the additive-noise covariance `gamma (N/p) M`; it is used
/// by SGLD and SGD only.
pub fn stationary_cov_linreg(
    kind: SamplerKind,
    sigma: &DMatrix<f64>,
    t_op: &KronOperator,
    gamma: f64,
    additive: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    let two = DMatrix::identity(d, d) * 2.0;
    match kind {
        SamplerKind::Lmc => build_h(sigma, gamma)?.solve_symmetric(&two),
        SamplerKind::Sgldfp => build_g(sigma, t_op, gamma)?.solve_symmetric(&two),
        SamplerKind::Sgld => build_g(sigma, t_op, gamma)?.solve_symmetric(&(two + additive)),
        SamplerKind::Sgd => build_g(sigma, t_op, gamma)?.solve_symmetric(additive),
    }
}

/// Cached linear-regression quantities for repeated covariance solves.
#[derive(Debug, Clone)]
pub struct LinRegOracle {
    pub sigma: DMatrix<f64>,
    pub theta_star: DVector<f64>,
    pub t_op: KronOperator,
    pub m: DMatrix<f64>,
    pub n_data: usize,
    pub p: usize,
}

impl LinRegOracle {
    pub fn new(model: &PosteriorModel, p: usize) -> Result<Self> {
        let post = model.linreg_posterior_params()?;
        let t_op = build_t(model, p)?;
        let m = build_m(model, &post.theta_star)?;
        Ok(Self { sigma: post.sigma, theta_star: post.theta_star, t_op, m, n_data: model.n_data(), p })
    }

    pub fn additive(&self, gamma: f64) -> DMatrix<f64> {
        &self.m * (gamma * self.n_data as f64 / self.p as f64)
    }

    pub fn stationary_cov(&self, kind: SamplerKind, gamma: f64) -> Result<DMatrix<f64>> {
        stationary_cov_linreg(kind, &self.sigma, &self.t_op, gamma, &self.additive(gamma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneDimMoments {
    /// Per-step contraction of the second moment about the mode.
    pub mu: f64,
    /// Second moment of the additive gradient noise at the mode.
    pub a: f64,
    pub gamma: f64,
    pub kind: SamplerKind,
    pub stationary_variance: f64,
}

impl OneDimMoments {
    fn increment(&self) -> f64 {
        let extra = if self.kind == SamplerKind::Sgld { self.gamma * self.gamma * self.a } else { 0.0 };
        2.0 * self.gamma + extra
    }

    /// Variance of the `n`-th iterate of a chain started at the mode.
    pub fn variance_at(&self, n: u32) -> f64 {
        (1.0 - self.mu.powi(n as i32)) / (1.0 - self.mu) * self.increment()
    }
}

/// Scalar second-moment recursion for one-dimensional linear regression.
pub fn sgld_1d_stationary_moments(model: &PosteriorModel, gamma: f64, p: usize, kind: SamplerKind) -> Result<OneDimMoments> {
    let (noise_var, prior_var) = match model.kind() {
        ModelKind::LinearRegression { noise_variance, prior_variance } => (noise_variance, prior_variance),
        _ => return Err(Error::WrongModelKind { expected: "linear_regression" }),
    };
    if model.dim() != 1 {
        return Err(Error::InvalidParameter(format!("one-dimensional model required, got d = {}", model.dim())));
    }
    if !matches!(kind, SamplerKind::Sgld | SamplerKind::Sgldfp) {
        return Err(Error::InvalidParameter(format!("kind must be SGLD or SGLDFP, got {kind}")));
    }
    if p == 0 {
        return Err(Error::InvalidParameter("minibatch size p must be >= 1".into()));
    }
    check_gamma(gamma)?;
    let post = model.linreg_posterior_params()?;
    let sigma = post.sigma[(0, 0)];
    let theta = post.theta_star[0];
    let ds = model.dataset();
    let n = ds.n_data() as f64;
    let pf = p as f64;
    let xs: Vec<f64> = (0..ds.n_data()).map(|r| ds.row(r)[0]).collect();
    let sum_x2: f64 = xs.iter().map(|x| x * x).sum();

    let gamma_max = 1.0 / (sigma * (1.0 + n / (pf * sum_x2)));
    if gamma > gamma_max {
        return Err(Error::StepSizeOutOfRange(format!("gamma = {gamma} exceeds {gamma_max}")));
    }

    let mean_x2 = sum_x2 / n;
    let spread: f64 = xs.iter().map(|x| (x * x - mean_x2).powi(2)).sum();
    let mu = 1.0 - 2.0 * gamma * sigma + gamma * gamma * (sigma * sigma + n / (noise_var * noise_var * pf) * spread);
    let a = n / pf
        * xs
            .iter()
            .zip(ds.responses())
            .map(|(x, y)| ((x * theta - y) * x / noise_var + theta / (n * prior_var)).powi(2))
            .sum::<f64>();
    let mut out = OneDimMoments { mu, a, gamma, kind, stationary_variance: 0.0 };
    out.stationary_variance = out.increment() / (1.0 - mu);
    Ok(out)
}

/// Leading-order mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentExpansion {
    pub cov: DMatrix<f64>,
    /// Approximation of `mean - theta_star`.
    pub mean_bias: DVector<f64>,
}

fn inverse_spd(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(h.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular("hessian at the mode is not positive definite".into()))
}

/// `cov ~ S^{-1}`, `bias ~ -1/2 S^{-1} D3U[S^{-1}]` at `theta_star`.
pub fn posterior_moment_expansion(model: &PosteriorModel, theta_star: &DVector<f64>) -> Result<MomentExpansion> {
    let h = model.hessian_at(theta_star);
    let h_inv = inverse_spd(&h)?;
    let t3 = model.third_derivative_at(theta_star);
    let mean_bias = -0.5 * &h_inv * t3.contract_matrix(&h_inv);
    Ok(MomentExpansion { cov: h_inv, mean_bias })
}

/// Mode-dependent pieces shared by every kind and step size.
#[derive(Debug, Clone)]
pub struct ExpansionContext {
    pub theta_star: DVector<f64>,
    pub hessian: DMatrix<f64>,
    hessian_inv: DMatrix<f64>,
    pub l_op: KronOperator,
    pub m: DMatrix<f64>,
    pub r_squared: f64,
    third: crate::model::Tensor3,
    lipschitz: f64,
    n_data: usize,
    p: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryExpansion {
    pub kind: SamplerKind,
    pub cov: DMatrix<f64>,
    pub mean_bias: DVector<f64>,
    pub eta: f64,
    pub eta0: f64,
}

impl ExpansionContext {
    pub fn new(model: &PosteriorModel, theta_star: DVector<f64>, p: usize) -> Result<Self> {
        let hessian = model.hessian_at(&theta_star);
        let hessian_inv = inverse_spd(&hessian)?;
        let l_op = build_l_for_model(model, &theta_star, p)?;
        let m = build_m(model, &theta_star)?;
        let r_squared = r_squared(&l_op, &hessian)?;
        let third = model.third_derivative_at(&theta_star);
        Ok(Self {
            hessian,
            hessian_inv,
            l_op,
            m,
            r_squared,
            third,
            theta_star,
            lipschitz: model.lipschitz_upper_bound(),
            n_data: model.n_data(),
            p,
        })
    }

    /// Locates the mode with [`MODE_TOL`] and builds the context there.
    pub fn at_mode(model: &PosteriorModel, p: usize) -> Result<Self> {
        let theta_star = model.find_mode(MODE_TOL, MODE_MAX_ITERS)?;
        Self::new(model, theta_star, p)
    }

    /// Largest admissible `eta = gamma N`, evaluated at the configured N.
    pub fn eta0(&self) -> f64 {
        let n = self.n_data as f64;
        let l = self.lipschitz;
        (n / (12.0 * l.max(1.0))).min(2.0 * n / ((1.0 + self.r_squared) * l))
    }

    pub fn g_operator(&self, gamma: f64) -> Result<KronOperator> {
        build_g(&self.hessian, &self.l_op, gamma)
    }

    pub fn expansion(&self, kind: SamplerKind, gamma: f64) -> Result<StationaryExpansion> {
        check_gamma(gamma)?;
        let eta = gamma * self.n_data as f64;
        let eta0 = self.eta0();
        if eta >= eta0 {
            return Err(Error::StepSizeOutOfRange(format!("eta = {eta} must be below eta0 = {eta0}")));
        }
        let d = self.hessian.nrows();
        let two = DMatrix::identity(d, d) * 2.0;
        let additive = &self.m * (eta / self.p as f64);
        let cov = match kind {
            SamplerKind::Lmc => build_h(&self.hessian, gamma)?.solve_symmetric(&two)?,
            SamplerKind::Sgldfp => self.g_operator(gamma)?.solve_symmetric(&two)?,
            SamplerKind::Sgld => self.g_operator(gamma)?.solve_symmetric(&(two + additive))?,
            SamplerKind::Sgd => self.g_operator(gamma)?.solve_symmetric(&additive)?,
        };
        let mean_bias = -0.5 * &self.hessian_inv * self.third.contract_matrix(&cov);
        Ok(StationaryExpansion { kind, cov, mean_bias, eta, eta0 })
    }
}

/// Leading-order stationary mean and covariance of `kind` with step `gamma`.
pub fn stationary_moment_expansion(kind: SamplerKind, model: &PosteriorModel, gamma: f64, p: usize) -> Result<StationaryExpansion> {
    ExpansionContext::at_mode(model, p)?.expansion(kind, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dataset;
    use approx::assert_abs_diff_eq;

    fn lin1(xs: &[f64], ys: &[f64]) -> PosteriorModel {
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        PosteriorModel::linear(Dataset::from_rows(&rows, ys.to_vec()).unwrap(), 1.0, 1.0).unwrap()
    }

    fn scalar(op: &KronOperator) -> f64 {
        assert_eq!(op.dim(), 1);
        op.matrix()[(0, 0)]
    }

    #[test]
    fn h_scalar_and_diagonal() {
        let h = build_h(&DMatrix::from_element(1, 1, 3.0), 0.1).unwrap();
        assert_abs_diff_eq!(scalar(&h), 5.1, epsilon = 1e-15);

        let (a, b, g) = (2.0, 5.0, 0.05);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![a, b]));
        let h = build_h(&s, g).unwrap();
        let out = h.apply(&DMatrix::identity(2, 2));
        assert_abs_diff_eq!(out[(0, 0)], 2.0 * a - g * a * a, epsilon = 1e-14);
        assert_abs_diff_eq!(out[(1, 1)], 2.0 * b - g * b * b, epsilon = 1e-14);
        assert_abs_diff_eq!(out[(0, 1)], 0.0);
        // dense check of Q -> SQ + QS - g SQS on a non-symmetric Q
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let expect = &s * &q + &q * &s - (&s * &q * &s) * g;
        assert_abs_diff_eq!((h.apply(&q) - expect).amax(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn h_outside_range_rejected() {
        let s = DMatrix::from_element(1, 1, 3.0);
        assert!(matches!(build_h(&s, 0.7), Err(Error::OperatorNotPositive { .. })));
    }

    #[test]
    fn sandwich_convention() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 2.0]);
        let q = DMatrix::from_row_slice(2, 2, &[5.0, -1.0, 0.5, 2.0]);
        let op = KronOperator::sandwich(&a, &b, OperatorTag::Custom).unwrap();
        assert_abs_diff_eq!((op.apply(&q) - &a * &q * &b).amax(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn t_and_l_examples() {
        assert_abs_diff_eq!(scalar(&build_t(&lin1(&[1.0, 1.0], &[0.0, 1.0]), 1).unwrap()), 0.0, epsilon = 1e-14);
        let m = lin1(&[1.0, 2.0], &[0.0, 1.0]);
        assert_abs_diff_eq!(scalar(&build_t(&m, 1).unwrap()), 9.0, epsilon = 1e-13);
        let star = m.linreg_posterior_params().unwrap().theta_star;
        assert_abs_diff_eq!(scalar(&build_l_for_model(&m, &star, 1).unwrap()), 9.0, epsilon = 1e-13);
    }

    #[test]
    fn equal_hessians_give_zero_l() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let l = build_l(&[h.clone(), h.clone(), h.clone()], 2).unwrap();
        assert_eq!(l.matrix().amax(), 0.0);
        let g = build_g(&h, &l, 0.1).unwrap();
        let hh = build_h(&h, 0.1).unwrap();
        assert_eq!(g.matrix(), hh.matrix());
    }

    #[test]
    fn m_examples() {
        let m = lin1(&[1.0, 1.0], &[0.0, 1.0]);
        let star = m.linreg_posterior_params().unwrap().theta_star;
        assert_abs_diff_eq!(build_m(&m, &star).unwrap()[(0, 0)], 0.5, epsilon = 1e-15);
        let single = lin1(&[1.3], &[0.2]);
        let star = single.linreg_posterior_params().unwrap().theta_star;
        assert_eq!(build_m(&single, &star).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn fixture_covariances() {
        let m = lin1(&[1.0, 1.0], &[0.0, 1.0]);
        let oracle = LinRegOracle::new(&m, 1).unwrap();
        assert_abs_diff_eq!(oracle.stationary_cov(SamplerKind::Lmc, 0.1).unwrap()[(0, 0)], 2.0 / 5.1, epsilon = 1e-14);
        assert_abs_diff_eq!(oracle.stationary_cov(SamplerKind::Sgldfp, 0.1).unwrap()[(0, 0)], 2.0 / 5.1, epsilon = 1e-14);
        assert_abs_diff_eq!(oracle.stationary_cov(SamplerKind::Sgld, 0.1).unwrap()[(0, 0)], 2.1 / 5.1, epsilon = 1e-14);
        assert_abs_diff_eq!(oracle.stationary_cov(SamplerKind::Sgd, 0.1).unwrap()[(0, 0)], 0.1 / 5.1, epsilon = 1e-14);
    }

    #[test]
    fn one_dim_recursion() {
        let m = lin1(&[1.0, 1.0], &[0.0, 1.0]);
        let s = sgld_1d_stationary_moments(&m, 0.1, 1, SamplerKind::Sgld).unwrap();
        let f = sgld_1d_stationary_moments(&m, 0.1, 1, SamplerKind::Sgldfp).unwrap();
        assert_abs_diff_eq!(s.mu, 0.49, epsilon = 1e-15);
        assert_abs_diff_eq!(s.a, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.stationary_variance, 0.21 / 0.51, epsilon = 1e-15);
        assert_abs_diff_eq!(f.stationary_variance, 0.2 / 0.51, epsilon = 1e-15);
        assert_abs_diff_eq!(s.stationary_variance - f.stationary_variance, 0.01 * s.a / (1.0 - s.mu), epsilon = 1e-15);
        assert_abs_diff_eq!(s.variance_at(1), 0.21, epsilon = 1e-15);
        assert!(s.variance_at(200) < s.stationary_variance + 1e-15);

        let one = lin1(&[1.7], &[0.4]);
        assert_abs_diff_eq!(sgld_1d_stationary_moments(&one, 0.05, 1, SamplerKind::Sgld).unwrap().a, 0.0, epsilon = 1e-14);
        assert!(matches!(
            sgld_1d_stationary_moments(&m, 0.2, 1, SamplerKind::Sgld),
            Err(Error::StepSizeOutOfRange(_))
        ));
    }

    #[test]
    fn expansion_linear_is_exact_and_unbiased() {
        let rows = vec![vec![0.5, -0.2], vec![0.1, 0.9], vec![-0.7, 0.3], vec![0.8, 0.8]];
        let ds = Dataset::from_rows(&rows, vec![0.3, -1.0, 0.5, 1.2]).unwrap();
        let m = PosteriorModel::linear(ds, 1.0, 1.0).unwrap();
        let oracle = LinRegOracle::new(&m, 2).unwrap();
        let ctx = ExpansionContext::at_mode(&m, 2).unwrap();
        let gamma = 0.5 * ctx.eta0() / m.n_data() as f64;
        for kind in SamplerKind::ALL {
            let e = ctx.expansion(kind, gamma).unwrap();
            let c = oracle.stationary_cov(kind, gamma).unwrap();
            assert_abs_diff_eq!((e.cov - c).amax(), 0.0, epsilon = 1e-12);
            assert_eq!(e.mean_bias.amax(), 0.0);
        }
        let too_big = 1.01 * ctx.eta0() / m.n_data() as f64;
        assert!(matches!(ctx.expansion(SamplerKind::Sgld, too_big), Err(Error::StepSizeOutOfRange(_))));
        let post = posterior_moment_expansion(&m, &oracle.theta_star).unwrap();
        assert_abs_diff_eq!((post.cov * &oracle.sigma - DMatrix::identity(2, 2)).amax(), 0.0, epsilon = 1e-12);
    }
}
