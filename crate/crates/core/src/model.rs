//! Gaussian-prior Bayesian linear and logistic regression posteriors.
//!
//! The potential is `U = U_0 + U_1 + ... + U_N` where `U_0` is the isotropic
//! Gaussian prior and `U_i` the negative log-likelihood of datum `i`. Datum
//! indices follow that convention throughout the crate: `0` is the prior and
//! `1..=N` address dataset rows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariates (row-major, `N x d`) and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn from_row_major(n: usize, d: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidDataset(format!("need N >= 1 and d >= 1, got N={n}, d={d}")));
        }
        if x.len() != n * d {
            return Err(Error::InvalidDataset(format!(
                "covariate buffer has {} entries, expected {}",
                x.len(),
                n * d
            )));
        }
        if y.len() != n {
            return Err(Error::InvalidDataset(format!("{} responses for {n} rows", y.len())));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite covariate at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!("non-finite response at row {pos}")));
        }
        Ok(Self { n, d, x, y })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::InvalidDataset(format!("row {i} has inconsistent length")));
        }
        let x = rows.iter().flatten().copied().collect();
        Self::from_row_major(rows.len(), d, x, y)
    }

    pub fn from_matrix(x: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        let (n, d) = x.shape();
        let mut flat = Vec::with_capacity(n * d);
        for i in 0..n {
            flat.extend(x.row(i).iter());
        }
        Self::from_row_major(n, d, flat, y.to_vec())
    }

    pub fn n_data(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Covariates of row `row` (0-based).
    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.x[row * self.d..(row + 1) * self.d]
    }

    #[inline]
    pub fn response(&self, row: usize) -> f64 {
        self.y[row]
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.x)
    }

    /// First `n` rows.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n {
            return Err(Error::InvalidParameter(format!("prefix of {n} rows from {}", self.n)));
        }
        Self::from_row_major(n, self.d, self.x[..n * self.d].to_vec(), self.y[..n].to_vec())
    }

    /// Split into the first `n_first` rows and the remainder.
    pub fn split_at(&self, n_first: usize) -> Result<(Self, Self)> {
        if n_first == 0 || n_first >= self.n {
            return Err(Error::InvalidParameter(format!("cannot split {} rows at {n_first}", self.n)));
        }
        let head = self.prefix(n_first)?;
        let tail = Self::from_row_major(
            self.n - n_first,
            self.d,
            self.x[n_first * self.d..].to_vec(),
            self.y[n_first..].to_vec(),
        )?;
        Ok((head, tail))
    }

    /// Every row repeated `k` times (as `k` stacked copies of the dataset).
    pub fn replicate(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("replication factor must be >= 1".into()));
        }
        let x = self.x.repeat(k);
        let y = self.y.repeat(k);
        Self::from_row_major(self.n * k, self.d, x, y)
    }

    /// Largest eigenvalue of `X^T X`.
    pub fn gram_max_eigenvalue(&self) -> f64 {
        let x = self.x_matrix();
        let gram = x.transpose() * &x;
        SymmetricEigen::new(gram).eigenvalues.max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression { noise_variance: f64, prior_variance: f64 },
    LogisticRegression { prior_variance: f64 },
}

impl ModelKind {
    pub fn prior_variance(&self) -> f64 {
        match *self {
            ModelKind::LinearRegression { prior_variance, .. } => prior_variance,
            ModelKind::LogisticRegression { prior_variance } => prior_variance,
        }
    }
}

/// Strong-convexity and gradient-Lipschitz constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    /// Strong convexity of `U`. For logistic regression this is the smallest
    /// Hessian eigenvalue at the mode, a local surrogate.
    pub m: f64,
    /// Gradient-Lipschitz constant of `U`, `(N + 1) * l_tilde`.
    pub l: f64,
    /// Per-term constant covering the prior and every likelihood term.
    pub l_tilde: f64,
    /// `max_i |x_i|^2` times the link curvature bound (`1/sigma_y^2` or `1/4`).
    pub likelihood_curvature: f64,
}

/// Closed-form linear-regression posterior `N(theta_star, sigma^{-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRegPosterior {
    pub sigma: DMatrix<f64>,
    pub theta_star: DVector<f64>,
}

/// Dense, fully symmetric `d x d x d` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dim: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim * dim] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.dim + i) * self.dim + j]
    }

    /// Adds `scale * v (x) v (x) v`.
    pub fn add_cube(&mut self, scale: f64, v: &[f64]) {
        let d = self.dim;
        for k in 0..d {
            for i in 0..d {
                let ki = scale * v[k] * v[i];
                for j in 0..d {
                    self.data[(k * d + i) * d + j] += ki * v[j];
                }
            }
        }
    }

    /// `(T[A])_k = sum_{ij} T_{kij} A_{ij}`.
    pub fn contract_matrix(&self, a: &DMatrix<f64>) -> DVector<f64> {
        let d = self.dim;
        DVector::from_fn(d, |k, _| {
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    acc += self.get(k, i, j) * a[(i, j)];
                }
            }
            acc
        })
    }

    /// `(T[u])_{ij} = sum_k T_{ijk} u_k`.
    pub fn contract_vector(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim;
        DMatrix::from_fn(d, d, |i, j| (0..d).map(|k| self.get(i, j, k) * u[k]).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[inline]
fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorModel {
    dataset: Dataset,
    kind: ModelKind,
}

impl PosteriorModel {
    pub fn new(dataset: Dataset, kind: ModelKind) -> Result<Self> {
        let ok = match kind {
            ModelKind::LinearRegression { noise_variance, prior_variance } => {
                noise_variance > 0.0 && prior_variance > 0.0 && noise_variance.is_finite() && prior_variance.is_finite()
            }
            ModelKind::LogisticRegression { prior_variance } => prior_variance > 0.0 && prior_variance.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidParameter(format!("variance parameters must be positive: {kind:?}")));
        }
        Ok(Self { dataset, kind })
    }

    pub fn linear(dataset: Dataset, noise_variance: f64, prior_variance: f64) -> Result<Self> {
        Self::new(dataset, ModelKind::LinearRegression { noise_variance, prior_variance })
    }

    pub fn logistic(dataset: Dataset, prior_variance: f64) -> Result<Self> {
        Self::new(dataset, ModelKind::LogisticRegression { prior_variance })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_data(&self) -> usize {
        self.dataset.n
    }

    pub fn dim(&self) -> usize {
        self.dataset.d
    }

    pub fn prior_variance(&self) -> f64 {
        self.kind.prior_variance()
    }

    /// Same model kind on a different dataset.
    pub fn with_dataset(&self, dataset: Dataset) -> Self {
        Self { dataset, kind: self.kind }
    }

    /// Derivatives of the per-datum negative log-likelihood with respect to
    /// the linear predictor `s = x^T theta`, up to third order.
    #[inline]
    fn link_derivatives(&self, s: f64, y: f64) -> (f64, f64, f64) {
        match self.kind {
            ModelKind::LinearRegression { noise_variance, .. } => ((s - y) / noise_variance, 1.0 / noise_variance, 0.0),
            ModelKind::LogisticRegression { .. } => {
                let p = sigmoid(s);
                let w = p * (1.0 - p);
                (p - y, w, w * (1.0 - 2.0 * p))
            }
        }
    }

    /// `dU_i/ds` at `s = x_row^T theta`; `grad U_{row+1} = slope * x_row`.
    #[inline]
    pub(crate) fn datum_slope(&self, row: usize, theta: &[f64]) -> f64 {
        let s = dot(self.dataset.row(row), theta);
        self.link_derivatives(s, self.dataset.response(row)).0
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i > self.dataset.n {
            Err(Error::IndexOutOfRange { index: i, n_data: self.dataset.n })
        } else {
            Ok(())
        }
    }

    /// `U(theta)`, up to an additive constant.
    pub fn potential(&self, theta: &DVector<f64>) -> f64 {
        theta.norm_squared() / (2.0 * self.prior_variance()) + self.neg_log_likelihood(theta)
    }

    /// `sum_{i>=1} U_i(theta)`, up to an additive constant for linear regression.
    pub fn neg_log_likelihood(&self, theta: &DVector<f64>) -> f64 {
        let t = theta.as_slice();
        (0..self.dataset.n)
            .map(|r| {
                let s = dot(self.dataset.row(r), t);
                let y = self.dataset.response(r);
                match self.kind {
                    ModelKind::LinearRegression { noise_variance, .. } => (s - y).powi(2) / (2.0 * noise_variance),
                    ModelKind::LogisticRegression { .. } => softplus(s) - y * s,
                }
            })
            .sum()
    }

    /// `out += scale * grad U_i(theta)` for `i` in `0..=N`. Unchecked index.
    #[inline]
    pub(crate) fn add_grad_datum(&self, i: usize, theta: &[f64], scale: f64, out: &mut [f64]) {
        if i == 0 {
            let c = scale / self.prior_variance();
            for (o, t) in out.iter_mut().zip(theta) {
                *o += c * t;
            }
        } else {
            let row = i - 1;
            let c = scale * self.datum_slope(row, theta);
            for (o, x) in out.iter_mut().zip(self.dataset.row(row)) {
                *o += c * x;
            }
        }
    }

    pub fn grad_datum(&self, i: usize, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_index(i)?;
        let mut out = DVector::zeros(self.dim());
        self.add_grad_datum(i, theta.as_slice(), 1.0, out.as_mut_slice());
        Ok(out)
    }

    pub fn grad_full(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let t = theta.as_slice();
        let o = out.as_mut_slice();
        for i in 0..=self.dataset.n {
            self.add_grad_datum(i, t, 1.0, o);
        }
        out
    }

    /// Gradient of the likelihood terms only, `sum_{i>=1} grad U_i`.
    pub fn grad_likelihood(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let t = theta.as_slice();
        for i in 1..=self.dataset.n {
            self.add_grad_datum(i, t, 1.0, out.as_mut_slice());
        }
        out
    }

    pub fn hessian_datum(&self, i: usize, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_index(i)?;
        let d = self.dim();
        if i == 0 {
            return Ok(DMatrix::identity(d, d) / self.prior_variance());
        }
        let row = self.dataset.row(i - 1);
        let (_, w, _) = self.link_derivatives(dot(row, theta.as_slice()), self.dataset.response(i - 1));
        Ok(DMatrix::from_fn(d, d, |a, b| w * row[a] * row[b]))
    }

    pub fn hessian_at(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::identity(d, d) / self.prior_variance();
        let t = theta.as_slice();
        for r in 0..self.dataset.n {
            let row = self.dataset.row(r);
            let (_, w, _) = self.link_derivatives(dot(row, t), self.dataset.response(r));
            for a in 0..d {
                for b in 0..d {
                    h[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        h
    }

    pub fn third_derivative_datum(&self, i: usize, theta: &DVector<f64>) -> Result<Tensor3> {
        self.check_index(i)?;
        let mut t = Tensor3::zeros(self.dim());
        if i > 0 {
            let row = self.dataset.row(i - 1);
            let (_, _, c) = self.link_derivatives(dot(row, theta.as_slice()), self.dataset.response(i - 1));
            t.add_cube(c, row);
        }
        Ok(t)
    }

    pub fn third_derivative_at(&self, theta: &DVector<f64>) -> Tensor3 {
        let mut t = Tensor3::zeros(self.dim());
        if let ModelKind::LinearRegression { .. } = self.kind {
            return t;
        }
        let th = theta.as_slice();
        for r in 0..self.dataset.n {
            let row = self.dataset.row(r);
            let (_, _, c) = self.link_derivatives(dot(row, th), self.dataset.response(r));
            t.add_cube(c, row);
        }
        t
    }

    /// `Sigma = Id / sigma_theta^2 + X^T X / sigma_y^2`, `theta_star = Sigma^{-1} X^T y / sigma_y^2`.
    pub fn linreg_posterior_params(&self) -> Result<LinRegPosterior> {
        let ModelKind::LinearRegression { noise_variance, prior_variance } = self.kind else {
            return Err(Error::WrongModelKind { expected: "linear regression" });
        };
        let d = self.dim();
        let x = self.dataset.x_matrix();
        let y = DVector::from_column_slice(&self.dataset.y);
        let sigma = DMatrix::identity(d, d) / prior_variance + x.transpose() * &x / noise_variance;
        let rhs = x.transpose() * y / noise_variance;
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("posterior precision is not positive definite".into()))?;
        let theta_star = chol.solve(&rhs);
        Ok(LinRegPosterior { sigma, theta_star })
    }

    /// Minimizer of `U`.
    ///
    /// Linear regression is solved in closed form. Logistic regression uses
    /// damped Newton with step halving, falling back to a `1/L` gradient
    /// step when the Hessian solve fails.
    pub fn find_mode(&self, tol: f64, max_iters: usize) -> Result<DVector<f64>> {
        if !(tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
        }
        if let ModelKind::LinearRegression { .. } = self.kind {
            let theta = self.linreg_posterior_params()?.theta_star;
            let g = self.grad_full(&theta).norm();
            if g <= tol {
                return Ok(theta);
            }
            return Err(Error::NonConvergence { iters: 0, grad_norm: g, last_iterate: theta.as_slice().to_vec() });
        }

        let fallback_step = 1.0 / self.lipschitz_bound().1;
        let mut theta = DVector::zeros(self.dim());
        let mut value = self.potential(&theta);
        let mut grad = self.grad_full(&theta);
        for _ in 0..max_iters {
            let gnorm = grad.norm();
            if gnorm <= tol {
                return Ok(theta);
            }
            let direction = match self.hessian_at(&theta).cholesky() {
                Some(chol) => chol.solve(&grad),
                None => &grad * fallback_step,
            };
            let slope = grad.dot(&direction);
            let mut t = 1.0;
            loop {
                let candidate = &theta - &direction * t;
                let cand_value = self.potential(&candidate);
                let sufficient = cand_value <= value - 1e-4 * t * slope;
                // Near the optimum U differences drop below rounding; accept a
                // step that does not raise U beyond rounding and shrinks the gradient.
                let flat = cand_value <= value + 1e-12 * value.abs().max(1.0);
                let cand_grad = if sufficient || flat { Some(self.grad_full(&candidate)) } else { None };
                if let Some(g) = cand_grad {
                    if sufficient || g.norm() < gnorm {
                        theta = candidate;
                        value = cand_value;
                        grad = g;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-12 {
                    return Err(Error::NonConvergence {
                        iters: max_iters,
                        grad_norm: gnorm,
                        last_iterate: theta.as_slice().to_vec(),
                    });
                }
            }
        }
        let grad_norm = grad.norm();
        if grad_norm <= tol {
            return Ok(theta);
        }
        Err(Error::NonConvergence { iters: max_iters, grad_norm, last_iterate: theta.as_slice().to_vec() })
    }

    /// Gradient-Lipschitz bound `L = (N + 1) L~`, computed from the data alone.
    pub fn lipschitz_upper_bound(&self) -> f64 {
        self.lipschitz_bound().2
    }

    /// `(likelihood_curvature, l_tilde, l)` from the data alone.
    fn lipschitz_bound(&self) -> (f64, f64, f64) {
        let c_kind = match self.kind {
            ModelKind::LinearRegression { noise_variance, .. } => 1.0 / noise_variance,
            ModelKind::LogisticRegression { .. } => 0.25,
        };
        let max_sq = (0..self.dataset.n)
            .map(|r| self.dataset.row(r).iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max);
        let curvature = max_sq * c_kind;
        let l_tilde = curvature.max(1.0 / self.prior_variance());
        (curvature, l_tilde, (self.dataset.n as f64 + 1.0) * l_tilde)
    }

    /// Constants `m`, `L`, `L~`. Runs a mode search for logistic models.
    pub fn lipschitz_constants(&self) -> Result<ModelConstants> {
        let (likelihood_curvature, l_tilde, l) = self.lipschitz_bound();
        let m = match self.kind {
            ModelKind::LinearRegression { .. } => {
                SymmetricEigen::new(self.linreg_posterior_params()?.sigma).eigenvalues.min()
            }
            ModelKind::LogisticRegression { .. } => {
                let mode = self.find_mode(1e-9 * (self.n_data() as f64).max(1.0), 200)?;
                SymmetricEigen::new(self.hessian_at(&mode)).eigenvalues.min()
            }
        };
        if !(m <= l) {
            return Err(Error::InvalidParameter(format!("strong convexity m={m} exceeds L={l}")));
        }
        Ok(ModelConstants { m, l, l_tilde, likelihood_curvature })
    }
}
