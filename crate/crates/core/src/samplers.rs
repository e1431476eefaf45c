//! Constant step-size Langevin kernels and chain drivers.
//!
//! Every kernel performs `theta <- theta - gamma * g(theta) + sqrt(2 gamma) Z`
//! where `g` is the full gradient (LMC), the subsampled estimator (SGLD, SGD)
//! or the control-variate estimator (SGLDFP). SGD drops the Gaussian term.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{draw_minibatch, ControlVariate, GradEstimator, Minibatch};
use crate::metrics::MomentAccumulator;
use crate::model::PosteriorModel;
use crate::rng::ChainStreams;

/// Iterates with a non-finite coordinate or norm above this abort the chain.
pub const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SamplerKind {
    #[serde(rename = "LMC")]
    Lmc,
    #[serde(rename = "SGLD")]
    Sgld,
    #[serde(rename = "SGLDFP")]
    Sgldfp,
    #[serde(rename = "SGD")]
    Sgd,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [SamplerKind::Lmc, SamplerKind::Sgldfp, SamplerKind::Sgld, SamplerKind::Sgd];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Lmc => "LMC",
            SamplerKind::Sgld => "SGLD",
            SamplerKind::Sgldfp => "SGLDFP",
            SamplerKind::Sgd => "SGD",
        }
    }

    pub fn injects_noise(self) -> bool {
        !matches!(self, SamplerKind::Sgd)
    }

    pub fn uses_minibatch(self) -> bool {
        !matches!(self, SamplerKind::Lmc)
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LMC" | "ULA" => Ok(SamplerKind::Lmc),
            "SGLD" => Ok(SamplerKind::Sgld),
            "SGLDFP" | "FP" => Ok(SamplerKind::Sgldfp),
            "SGD" => Ok(SamplerKind::Sgd),
            other => Err(Error::InvalidParameter(format!("unknown sampler kind {other:?}"))),
        }
    }
}

/// One Markov kernel: kind, step size, minibatch size and gradient estimator.
#[derive(Debug, Clone)]
pub struct Kernel {
    kind: SamplerKind,
    gamma: f64,
    p: usize,
    estimator: GradEstimator,
}

impl Kernel {
    /// `center` is required for SGLDFP and ignored otherwise.
    pub fn new(model: &PosteriorModel, kind: SamplerKind, gamma: f64, p: usize, center: Option<&DVector<f64>>) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::StepSizeOutOfRange(format!("gamma must be positive and finite, got {gamma}")));
        }
        if p == 0 {
            return Err(Error::InvalidParameter("minibatch size p must be >= 1".into()));
        }
        let estimator = match kind {
            SamplerKind::Lmc => GradEstimator::FullBatch,
            SamplerKind::Sgld | SamplerKind::Sgd => GradEstimator::Subsampled,
            SamplerKind::Sgldfp => {
                let c = center.ok_or_else(|| Error::InvalidParameter("SGLDFP requires a control-variate center".into()))?;
                GradEstimator::ControlVariate(ControlVariate::new(model, c.clone())?)
            }
        };
        Ok(Self { kind, gamma, p, estimator })
    }

    /// Shares an already built estimator (avoids recomputing control-variate caches).
    pub fn with_estimator(kind: SamplerKind, gamma: f64, p: usize, estimator: GradEstimator) -> Result<Self> {
        let ok = matches!(
            (kind, &estimator),
            (SamplerKind::Lmc, GradEstimator::FullBatch)
                | (SamplerKind::Sgld | SamplerKind::Sgd, GradEstimator::Subsampled)
                | (SamplerKind::Sgldfp, GradEstimator::ControlVariate(_))
        );
        if !ok {
            return Err(Error::EstimatorMismatch("estimator does not match sampler kind"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) || p == 0 {
            return Err(Error::InvalidParameter(format!("invalid gamma={gamma} or p={p}")));
        }
        Ok(Self { kind, gamma, p, estimator })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn minibatch_size(&self) -> usize {
        self.p
    }

    pub fn estimator(&self) -> &GradEstimator {
        &self.estimator
    }

    /// One transition with externally supplied minibatch and Gaussian draw.
    /// `z` is ignored by SGD and `batch` by LMC.
    pub fn step_with(&self, model: &PosteriorModel, theta: &DVector<f64>, batch: &Minibatch, z: &DVector<f64>) -> Result<DVector<f64>> {
        let mut next = theta.clone();
        let mut grad = vec![0.0; theta.len()];
        self.advance(model, next.as_mut_slice(), batch, z.as_slice(), &mut grad)?;
        Ok(next)
    }

    /// In-place transition. `grad` is scratch space of length `d`.
    pub(crate) fn advance(&self, model: &PosteriorModel, theta: &mut [f64], batch: &Minibatch, z: &[f64], grad: &mut [f64]) -> Result<()> {
        self.estimator.evaluate_into(model, theta, batch, grad);
        let noise_scale = if self.kind.injects_noise() { (2.0 * self.gamma).sqrt() } else { 0.0 };
        let mut norm_sq = 0.0;
        let mut finite = true;
        for k in 0..theta.len() {
            let mut v = theta[k] - self.gamma * grad[k];
            if noise_scale > 0.0 {
                v += noise_scale * z[k];
            }
            finite &= v.is_finite();
            norm_sq += v * v;
            theta[k] = v;
        }
        if !finite || norm_sq.sqrt() > DIVERGENCE_NORM {
            return Err(Error::Divergence { kind: self.kind.name().into(), gamma: self.gamma, iteration: 0 });
        }
        Ok(())
    }
}

fn fill_gaussian<R: Rng + ?Sized>(z: &mut [f64], rng: &mut R) {
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Draws the minibatch and Gaussian increment from `streams` and advances `theta`.
pub fn step(model: &PosteriorModel, kernel: &Kernel, theta: &DVector<f64>, streams: &mut ChainStreams) -> Result<DVector<f64>> {
    let batch = draw_minibatch(model.n_data(), kernel.p, &mut streams.minibatch)?;
    let mut z = DVector::zeros(theta.len());
    if kernel.kind.injects_noise() {
        fill_gaussian(z.as_mut_slice(), &mut streams.gaussian);
    }
    kernel.step_with(model, theta, &batch, &z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub kind: SamplerKind,
    pub gamma: f64,
    pub p: usize,
    pub n_iters: usize,
    pub burn_in_fraction: f64,
    pub seed: u64,
    /// Selects this chain's stream family under `seed`.
    pub chain_id: u64,
    pub init: Vec<f64>,
    /// Control-variate center for SGLDFP.
    pub center: Option<Vec<f64>>,
    pub keep_samples: bool,
    /// Reject `gamma >= 2/L` with the data-derived Lipschitz bound.
    pub check_step_bound: bool,
}

impl ChainConfig {
    /// Defaults: `p = 1`, `n_iters = ceil(1/gamma)`, 10% burn-in, bound check on.
    pub fn new(kind: SamplerKind, gamma: f64, init: Vec<f64>) -> Self {
        let n_iters = if gamma > 0.0 { (1.0 / gamma).ceil() as usize } else { 0 };
        Self {
            kind,
            gamma,
            p: 1,
            n_iters,
            burn_in_fraction: 0.10,
            seed: 0,
            chain_id: 0,
            init,
            center: None,
            keep_samples: false,
            check_step_bound: true,
        }
    }

    pub fn n_burn_in(&self) -> usize {
        (self.burn_in_fraction * self.n_iters as f64).floor() as usize
    }

    pub fn n_kept(&self) -> usize {
        self.n_iters - self.n_burn_in()
    }

    fn validate(&self, model: &PosteriorModel) -> Result<()> {
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::InvalidParameter(format!("burn-in fraction {} outside [0, 1)", self.burn_in_fraction)));
        }
        if self.init.len() != model.dim() {
            return Err(Error::InvalidParameter(format!("init has dimension {}, model has {}", self.init.len(), model.dim())));
        }
        if self.check_step_bound {
            let l = model.lipschitz_upper_bound();
            if self.gamma >= 2.0 / l {
                return Err(Error::StepSizeOutOfRange(format!("gamma = {} >= 2/L = {}", self.gamma, 2.0 / l)));
            }
        }
        Ok(())
    }

    fn kernel(&self, model: &PosteriorModel) -> Result<Kernel> {
        let center = self.center.as_ref().map(|c| DVector::from_column_slice(c));
        Kernel::new(model, self.kind, self.gamma, self.p, center.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Streaming moments of the post-burn-in iterates.
    pub moments: MomentAccumulator,
    /// Post-burn-in iterates, when `keep_samples` is set.
    pub samples: Option<Vec<Vec<f64>>>,
    pub n_kept: usize,
    pub final_state: DVector<f64>,
}

/// Runs one chain. Iterates `theta_1..theta_n` are produced; the first
/// `floor(burn_in_fraction * n)` are discarded.
pub fn run_chain(model: &PosteriorModel, config: &ChainConfig) -> Result<ChainOutput> {
    run_chain_observed(model, config, |_, _| {})
}

/// As [`run_chain`], calling `observer(k, theta_k)` after every step `k = 1..=n`.
pub fn run_chain_observed<F>(model: &PosteriorModel, config: &ChainConfig, observer: F) -> Result<ChainOutput>
where
    F: FnMut(usize, &[f64]),
{
    config.validate(model)?;
    let kernel = config.kernel(model)?;
    run_kernel_observed(model, &kernel, config, observer)
}

/// Runs a prebuilt kernel with the iteration counts, seed and init of `config`.
pub fn run_kernel_observed<F>(model: &PosteriorModel, kernel: &Kernel, config: &ChainConfig, mut observer: F) -> Result<ChainOutput>
where
    F: FnMut(usize, &[f64]),
{
    let d = model.dim();
    let mut streams = ChainStreams::new(config.seed, config.chain_id);
    let mut theta = config.init.clone();
    let mut grad = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut batch = draw_minibatch(model.n_data(), kernel.p, &mut streams.minibatch)?;
    let n_burn = config.n_burn_in();
    let mut moments = MomentAccumulator::new(d);
    let mut samples = config.keep_samples.then(|| Vec::with_capacity(config.n_kept()));

    for k in 1..=config.n_iters {
        if kernel.kind.uses_minibatch() && k > 1 {
            batch.redraw(model.n_data(), &mut streams.minibatch);
        }
        if kernel.kind.injects_noise() {
            fill_gaussian(&mut z, &mut streams.gaussian);
        }
        kernel.advance(model, &mut theta, &batch, &z, &mut grad).map_err(|e| match e {
            Error::Divergence { kind, gamma, .. } => Error::Divergence { kind, gamma, iteration: k },
            other => other,
        })?;
        observer(k, &theta);
        if k > n_burn {
            moments.push(&theta);
            if let Some(s) = samples.as_mut() {
                s.push(theta.clone());
            }
        }
    }
    Ok(ChainOutput {
        n_kept: moments.count(),
        moments,
        samples,
        final_state: DVector::from_vec(theta),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub gamma: f64,
    pub p: usize,
    pub n_iters: usize,
    pub n_replicas: usize,
    pub seed: u64,
    pub center: Option<Vec<f64>>,
}

/// Per-iteration replica average of `|theta_a,k - theta_b,k|^2`, `k = 0..=n_iters`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingTrace {
    pub mean_sq_dist: Vec<f64>,
    /// Monte Carlo standard error of each mean.
    pub stderr: Vec<f64>,
    pub n_replicas: usize,
}

/// Synchronously coupled chains: each replica owns one Gaussian and one
/// minibatch stream, and both chains consume the same draws at every step.
pub fn run_coupled_chains(
    model: &PosteriorModel,
    kind_a: SamplerKind,
    kind_b: SamplerKind,
    config: &CouplingConfig,
    init_a: &DVector<f64>,
    init_b: &DVector<f64>,
) -> Result<CouplingTrace> {
    if config.n_replicas == 0 {
        return Err(Error::InvalidParameter("need at least one replica".into()));
    }
    let d = model.dim();
    if init_a.len() != d || init_b.len() != d {
        return Err(Error::InvalidParameter("init dimension mismatch".into()));
    }
    let center = config.center.as_ref().map(|c| DVector::from_column_slice(c));
    let kernel_a = Kernel::new(model, kind_a, config.gamma, config.p, center.as_ref())?;
    let kernel_b = if kind_b == kind_a {
        kernel_a.clone()
    } else {
        Kernel::new(model, kind_b, config.gamma, config.p, center.as_ref())?
    };

    let traces: Vec<Vec<f64>> = (0..config.n_replicas as u64)
        .into_par_iter()
        .map(|replica| -> Result<Vec<f64>> {
            let mut streams = ChainStreams::new(config.seed, replica);
            let mut a = init_a.as_slice().to_vec();
            let mut b = init_b.as_slice().to_vec();
            let mut grad = vec![0.0; d];
            let mut z = vec![0.0; d];
            let mut batch = draw_minibatch(model.n_data(), config.p, &mut streams.minibatch)?;
            let mut trace = Vec::with_capacity(config.n_iters + 1);
            trace.push(sq_dist(&a, &b));
            for k in 1..=config.n_iters {
                if k > 1 {
                    batch.redraw(model.n_data(), &mut streams.minibatch);
                }
                fill_gaussian(&mut z, &mut streams.gaussian);
                let tag = |e: Error| match e {
                    Error::Divergence { kind, gamma, .. } => Error::Divergence { kind, gamma, iteration: k },
                    other => other,
                };
                kernel_a.advance(model, &mut a, &batch, &z, &mut grad).map_err(tag)?;
                kernel_b.advance(model, &mut b, &batch, &z, &mut grad).map_err(tag)?;
                trace.push(sq_dist(&a, &b));
            }
            Ok(trace)
        })
        .collect::<Result<_>>()?;

    let r = config.n_replicas as f64;
    let len = config.n_iters + 1;
    let mut mean_sq_dist = vec![0.0; len];
    let mut stderr = vec![0.0; len];
    for k in 0..len {
        let mean = traces.iter().map(|t| t[k]).sum::<f64>() / r;
        let var = if config.n_replicas > 1 {
            traces.iter().map(|t| (t[k] - mean).powi(2)).sum::<f64>() / (r - 1.0)
        } else {
            0.0
        };
        mean_sq_dist[k] = mean;
        stderr[k] = (var / r).sqrt();
    }
    Ok(CouplingTrace { mean_sq_dist, stderr, n_replicas: config.n_replicas })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dataset;
    use approx::assert_abs_diff_eq;

    fn one_d(xs: &[f64], ys: &[f64]) -> PosteriorModel {
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        PosteriorModel::linear(Dataset::from_rows(&rows, ys.to_vec()).unwrap(), 1.0, 1.0).unwrap()
    }

    #[test]
    fn sgd_fixed_point_single_datum() {
        let m = one_d(&[1.0], &[0.4]);
        let star = m.linreg_posterior_params().unwrap().theta_star;
        let k = Kernel::new(&m, SamplerKind::Sgd, 0.1, 1, None).unwrap();
        let mut streams = ChainStreams::new(1, 0);
        assert_eq!(step(&m, &k, &star, &mut streams).unwrap(), star);
    }

    #[test]
    fn lmc_newton_step_without_noise() {
        let m = one_d(&[1.0, 1.0], &[0.0, 1.0]);
        let star = m.linreg_posterior_params().unwrap().theta_star;
        let k = Kernel::new(&m, SamplerKind::Lmc, 1.0 / 3.0, 1, None).unwrap();
        let batch = Minibatch::from_indices(vec![1], 2).unwrap();
        let next = k.step_with(&m, &DVector::from_element(1, 5.0), &batch, &DVector::zeros(1)).unwrap();
        assert_abs_diff_eq!(next[0], star[0], epsilon = 1e-15);
    }

    #[test]
    fn sgld_minus_sgd_is_gaussian_increment() {
        let m = one_d(&[1.0, 2.0, -1.0], &[0.0, 1.0, 0.5]);
        let gamma = 0.01;
        let sgld = Kernel::new(&m, SamplerKind::Sgld, gamma, 2, None).unwrap();
        let sgd = Kernel::new(&m, SamplerKind::Sgd, gamma, 2, None).unwrap();
        let theta = DVector::from_element(1, 0.3);
        let mut s1 = ChainStreams::new(11, 0);
        let mut s2 = ChainStreams::new(11, 0);
        let a = step(&m, &sgld, &theta, &mut s1).unwrap();
        let b = step(&m, &sgd, &theta, &mut s2).unwrap();
        let z: f64 = ChainStreams::new(11, 0).gaussian.sample(StandardNormal);
        assert_abs_diff_eq!(a[0] - b[0], (2.0 * gamma).sqrt() * z, epsilon = 1e-14);
    }

    #[test]
    fn divergence_is_reported() {
        let m = one_d(&[1.0, 1.0], &[0.0, 1.0]);
        let mut cfg = ChainConfig::new(SamplerKind::Lmc, 1.5, vec![1.0]);
        cfg.n_iters = 500;
        cfg.check_step_bound = false;
        match run_chain(&m, &cfg) {
            Err(Error::Divergence { kind, iteration, .. }) => {
                assert_eq!(kind, "LMC");
                assert!(iteration > 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        cfg.check_step_bound = true;
        assert!(matches!(run_chain(&m, &cfg), Err(Error::StepSizeOutOfRange(_))));
    }

    #[test]
    fn empty_chain_and_burn_in_count() {
        let m = one_d(&[1.0, 1.0], &[0.0, 1.0]);
        let mut cfg = ChainConfig::new(SamplerKind::Sgld, 0.1, vec![0.5]);
        cfg.n_iters = 0;
        let out = run_chain(&m, &cfg).unwrap();
        assert_eq!(out.n_kept, 0);
        assert_eq!(out.final_state[0], 0.5);

        cfg.n_iters = 37;
        cfg.keep_samples = true;
        let out = run_chain(&m, &cfg).unwrap();
        assert_eq!(out.n_kept, 37 - 3);
        assert_eq!(out.samples.unwrap().len(), 34);
        assert_eq!(ChainConfig::new(SamplerKind::Lmc, 0.003, vec![0.0]).n_iters, 334);
    }

    #[test]
    fn sgldfp_needs_center() {
        let m = one_d(&[1.0, 1.0], &[0.0, 1.0]);
        let cfg = ChainConfig::new(SamplerKind::Sgldfp, 0.1, vec![0.5]);
        assert!(run_chain(&m, &cfg).is_err());
    }

    #[test]
    fn identical_coupling_stays_together() {
        let m = one_d(&[1.0, 2.0], &[0.0, 1.0]);
        let star = m.linreg_posterior_params().unwrap().theta_star;
        let cfg = CouplingConfig {
            gamma: 0.05,
            p: 1,
            n_iters: 50,
            n_replicas: 4,
            seed: 3,
            center: Some(star.as_slice().to_vec()),
        };
        let init = DVector::from_element(1, 1.0);
        for kind in SamplerKind::ALL {
            let t = run_coupled_chains(&m, kind, kind, &cfg, &init, &init).unwrap();
            assert!(t.mean_sq_dist.iter().all(|&v| v == 0.0), "{kind}");
        }
    }
}
