use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::samplers::SamplerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Fig1BiasSweep,
    Fig2CovTraceSweep,
    Fig3GradVariance,
    Fig4TestNll,
    OracleLinreg,
    CouplingContraction,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Fig1BiasSweep,
        ExperimentKind::Fig2CovTraceSweep,
        ExperimentKind::Fig3GradVariance,
        ExperimentKind::Fig4TestNll,
        ExperimentKind::OracleLinreg,
        ExperimentKind::CouplingContraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Fig1BiasSweep => "fig1_bias_sweep",
            ExperimentKind::Fig2CovTraceSweep => "fig2_cov_trace_sweep",
            ExperimentKind::Fig3GradVariance => "fig3_grad_variance",
            ExperimentKind::Fig4TestNll => "fig4_test_nll",
            ExperimentKind::OracleLinreg => "oracle_linreg",
            ExperimentKind::CouplingContraction => "coupling_contraction",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown experiment {s:?}")))
    }
}

/// How the step size is chosen for a dataset of size N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    /// `gamma = eta / N`.
    #[serde(rename = "eta_over_N")]
    EtaOverN { eta: f64 },
    /// `gamma = 1 / (1 + delta/4)`, delta the top eigenvalue of X^T X.
    Spectral,
    /// `gamma = 1 / N`.
    #[serde(rename = "inverse_N")]
    InverseN,
    Fixed { gamma: f64 },
}

impl StepRule {
    pub fn name(&self) -> &'static str {
        match self {
            StepRule::EtaOverN { .. } => "eta_over_N",
            StepRule::Spectral => "spectral",
            StepRule::InverseN => "inverse_N",
            StepRule::Fixed { .. } => "fixed",
        }
    }

    pub fn gamma(&self, dataset: &Dataset) -> f64 {
        let n = dataset.n_data() as f64;
        match *self {
            StepRule::EtaOverN { eta } => eta / n,
            StepRule::Spectral => 1.0 / (1.0 + dataset.gram_max_eigenvalue() / 4.0),
            StepRule::InverseN => 1.0 / n,
            StepRule::Fixed { gamma } => gamma,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            StepRule::EtaOverN { eta } => eta,
            StepRule::Fixed { gamma } => gamma,
            _ => 1.0,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("step rule parameter must be positive, got {v}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Standard Gaussian covariates, Bernoulli responses; `theta_true`
    /// defaults to a standard Gaussian draw from the seed.
    SimulatedLogistic {
        d: usize,
        prior_variance: f64,
        #[serde(default)]
        theta_true: Option<Vec<f64>>,
    },
    /// Logistic regression on a libsvm file.
    LibsvmLogistic { path: PathBuf, prior_variance: f64 },
    /// Linear regression on inline data.
    Linear {
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        noise_variance: f64,
        prior_variance: f64,
    },
}

impl ModelSpec {
    /// The two-point, one-dimensional linear fixture.
    pub fn linear_fixture() -> Self {
        ModelSpec::Linear { x: vec![vec![1.0], vec![1.0]], y: vec![0.0, 1.0], noise_variance: 1.0, prior_variance: 1.0 }
    }

    pub fn simulated_logistic(d: usize) -> Self {
        ModelSpec::SimulatedLogistic { d, prior_variance: 1.0, theta_true: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(rename = "N_grid")]
    pub n_grid: Vec<usize>,
    pub step_rule: StepRule,
    pub p: usize,
    pub replicas: usize,
    pub seed: u64,
    pub model: ModelSpec,
    pub kinds: Vec<SamplerKind>,
    /// Overrides the default `ceil(1/gamma)` iteration count.
    #[serde(default)]
    pub n_iters: Option<usize>,
    pub burn_in_fraction: f64,
    /// Gradient-norm tolerance for the mode.
    pub mode_tol: f64,
    /// fig3: trajectory points per replica and minibatch draws per point.
    pub grad_points: usize,
    pub grad_draws: usize,
    /// fig4: number of iteration blocks.
    pub nll_blocks: usize,
    /// fig4: fraction of rows held out at the end of the master dataset.
    pub test_fraction: f64,
    /// oracle_linreg: number of contiguous batches for batch-means errors.
    pub n_batches: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for each experiment.
    pub fn desk(experiment: ExperimentKind, seed: u64) -> Self {
        let sweep = vec![100, 316, 1000, 3162, 10000];
        let base = Self {
            experiment,
            n_grid: sweep.clone(),
            step_rule: StepRule::Spectral,
            p: 1,
            replicas: 20,
            seed,
            model: ModelSpec::simulated_logistic(2),
            kinds: SamplerKind::ALL.to_vec(),
            n_iters: None,
            burn_in_fraction: 0.10,
            mode_tol: 1e-9,
            grad_points: 20,
            grad_draws: 50,
            nll_blocks: 10,
            test_fraction: 0.2,
            n_batches: 100,
            output: None,
        };
        match experiment {
            ExperimentKind::Fig1BiasSweep | ExperimentKind::Fig2CovTraceSweep => Self { p: 4, ..base },
            ExperimentKind::Fig3GradVariance => Self {
                step_rule: StepRule::InverseN,
                kinds: vec![SamplerKind::Sgldfp, SamplerKind::Sgld, SamplerKind::Sgd],
                ..base
            },
            ExperimentKind::Fig4TestNll => Self {
                n_grid: vec![1000, 3162, 10000],
                step_rule: StepRule::InverseN,
                p: 10,
                kinds: vec![SamplerKind::Sgldfp, SamplerKind::Sgld, SamplerKind::Sgd],
                ..base
            },
            ExperimentKind::OracleLinreg => Self {
                n_grid: vec![2],
                step_rule: StepRule::Fixed { gamma: 0.1 },
                replicas: 1,
                model: ModelSpec::linear_fixture(),
                n_iters: Some(200_000),
                ..base
            },
            ExperimentKind::CouplingContraction => Self {
                n_grid: vec![2],
                step_rule: StepRule::Fixed { gamma: 0.1 },
                replicas: 200,
                model: ModelSpec::linear_fixture(),
                n_iters: Some(200),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::InvalidParameter("N_grid must be non-empty with positive entries".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("N_grid must be strictly ascending".into()));
        }
        if self.replicas == 0 {
            return Err(Error::InvalidParameter("replicas must be >= 1".into()));
        }
        if self.p == 0 {
            return Err(Error::InvalidParameter("p must be >= 1".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidParameter("at least one sampler kind is required".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::InvalidParameter("burn_in_fraction must lie in [0, 1)".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidParameter("test_fraction must lie in (0, 1)".into()));
        }
        if self.grad_draws < 2 || self.grad_points == 0 || self.nll_blocks == 0 || self.n_batches < 2 {
            return Err(Error::InvalidParameter("grad_draws >= 2, grad_points, nll_blocks >= 1 and n_batches >= 2 required".into()));
        }
        self.step_rule.validate()
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_names() {
        for kind in ExperimentKind::ALL {
            let cfg = ExperimentConfig::desk(kind, 5);
            cfg.validate().unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            assert!(text.contains(kind.name()));
            let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(kind.name().parse::<ExperimentKind>().unwrap(), kind);
        }
        let text = serde_json::to_string(&StepRule::EtaOverN { eta: 0.5 }).unwrap();
        assert_eq!(text, r#"{"rule":"eta_over_N","eta":0.5}"#);
    }

    #[test]
    fn rejects_unsorted_grid() {
        let mut cfg = ExperimentConfig::desk(ExperimentKind::Fig1BiasSweep, 1);
        cfg.n_grid = vec![100, 50];
        assert!(cfg.validate().is_err());
        cfg.n_grid = vec![100];
        cfg.replicas = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn step_rules() {
        let ds = Dataset::from_rows(&[vec![2.0], vec![0.0]], vec![0.0, 1.0]).unwrap();
        assert_eq!(StepRule::Spectral.gamma(&ds), 0.5);
        assert_eq!(StepRule::InverseN.gamma(&ds), 0.5);
        assert_eq!(StepRule::EtaOverN { eta: 0.1 }.gamma(&ds), 0.05);
    }
}
