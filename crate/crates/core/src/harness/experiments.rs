use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::config::{ExperimentConfig, ExperimentKind, ModelSpec};
use super::data::{parse_libsvm, simulate_logistic_dataset};
use super::output::{emit_csv, emit_json, MetricRow, RunRecord, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::gradients::empirical_gradient_variance;
use crate::metrics::{batch_means, fit_loglog_slope, mean_and_stderr, w2_gaussian, GaussianSummary};
use crate::model::{Dataset, PosteriorModel};
use crate::rng::{derive_stream, StreamPurpose};
use crate::samplers::{run_chain, run_chain_observed, run_coupled_chains, ChainConfig, ChainOutput, CouplingConfig, Kernel, SamplerKind};
use crate::stationary::{sgld_1d_stationary_moments, LinRegOracle};

const MODE_MAX_ITERS: usize = 500;

/// Runs the configured experiment and writes CSV (and JSON next to it)
/// when `config.output` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let start = Instant::now();
    let (rows, notes) = match config.experiment {
        ExperimentKind::Fig1BiasSweep | ExperimentKind::Fig2CovTraceSweep => sweep_moments(config)?,
        ExperimentKind::Fig3GradVariance => grad_variance(config)?,
        ExperimentKind::Fig4TestNll => test_nll(config)?,
        ExperimentKind::OracleLinreg => oracle_linreg(config)?,
        ExperimentKind::CouplingContraction => coupling(config)?,
    };
    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        rows,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        notes,
    };
    if let Some(path) = &config.output {
        emit_csv(&record.rows, path)?;
        emit_json(&record, &path.with_extension("json"))?;
    }
    Ok(record)
}

/// Unique stream family per (grid point, kind, replica).
fn chain_id(n_index: usize, kind_index: usize, replica: usize) -> u64 {
    ((n_index as u64) << 40) | ((kind_index as u64) << 32) | replica as u64
}

struct RowFactory<'a> {
    cfg: &'a ExperimentConfig,
}

impl RowFactory<'_> {
    #[allow(clippy::too_many_arguments)]
    fn row(&self, kind: &str, n: usize, gamma: f64, metric: &str, value: f64, stderr: f64) -> MetricRow {
        MetricRow {
            experiment: self.cfg.experiment.name().to_owned(),
            kind: kind.to_owned(),
            n,
            gamma,
            step_rule: self.cfg.step_rule.name().to_owned(),
            p: self.cfg.p,
            replicas: self.cfg.replicas,
            metric_name: metric.to_owned(),
            metric_value: value,
            stderr,
            seed: self.cfg.seed,
        }
    }
}

fn master_dataset(spec: &ModelSpec, n_rows: usize, seed: u64) -> Result<Dataset> {
    match spec {
        ModelSpec::SimulatedLogistic { d, theta_true, .. } => Ok(simulate_logistic_dataset(n_rows, *d, seed, theta_true.as_deref())?.0),
        ModelSpec::LibsvmLogistic { path, .. } => {
            let ds = parse_libsvm(path)?.dataset;
            if ds.n_data() < n_rows {
                return Err(Error::InvalidDataset(format!("{} has {} rows, {} needed", path.display(), ds.n_data(), n_rows)));
            }
            Ok(ds)
        }
        ModelSpec::Linear { x, y, .. } => Dataset::from_rows(x, y.clone()),
    }
}

fn build_model(spec: &ModelSpec, ds: Dataset) -> Result<PosteriorModel> {
    match spec {
        ModelSpec::SimulatedLogistic { prior_variance, .. } | ModelSpec::LibsvmLogistic { prior_variance, .. } => {
            PosteriorModel::logistic(ds, *prior_variance)
        }
        ModelSpec::Linear { noise_variance, prior_variance, .. } => PosteriorModel::linear(ds, *noise_variance, *prior_variance),
    }
}

fn chain_config(cfg: &ExperimentConfig, kind: SamplerKind, gamma: f64, init: &DVector<f64>, id: u64) -> ChainConfig {
    let mut c = ChainConfig::new(kind, gamma, init.as_slice().to_vec());
    c.p = cfg.p;
    if let Some(n) = cfg.n_iters {
        c.n_iters = n;
    }
    c.burn_in_fraction = cfg.burn_in_fraction;
    c.seed = cfg.seed;
    c.chain_id = id;
    c.center = Some(init.as_slice().to_vec());
    // The worst-case bound L = (N+1) L~ rules out the step sizes the sweeps use.
    c.check_step_bound = false;
    c
}

/// First divergence iteration among replicas, or the successful outputs.
fn split_divergence(results: Vec<Result<ChainOutput>>) -> Result<std::result::Result<Vec<ChainOutput>, usize>> {
    let mut outs = Vec::with_capacity(results.len());
    let mut first: Option<usize> = None;
    for r in results {
        match r {
            Ok(o) => outs.push(o),
            Err(Error::Divergence { iteration, .. }) => first = Some(first.map_or(iteration, |f| f.min(iteration))),
            Err(e) => return Err(e),
        }
    }
    Ok(match first {
        Some(it) => Err(it),
        None => Ok(outs),
    })
}

fn push_slopes(rows: &mut Vec<MetricRow>, f: &RowFactory<'_>, kinds: &[String], metric: &str) {
    for kind in kinds {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| &r.kind == kind && r.metric_name == metric && r.n > 0)
            .map(|r| (r.n as f64, r.metric_value))
            .collect();
        if points.len() < 2 || points.iter().any(|p| p.1 <= 0.0) {
            continue;
        }
        let n_metric = f.cfg.n_grid.len();
        if points.len() != n_metric {
            continue;
        }
        if let Ok(fit) = fit_loglog_slope(&points) {
            rows.push(f.row(kind, 0, 0.0, &format!("slope_{metric}"), fit.slope, fit.residual));
        }
    }
}

/// fig1 / fig2: mean and covariance of each kind's chain across the N grid.
fn sweep_moments(cfg: &ExperimentConfig) -> Result<(Vec<MetricRow>, Vec<String>)> {
    let f = RowFactory { cfg };
    let fig1 = cfg.experiment == ExperimentKind::Fig1BiasSweep;
    let n_max = *cfg.n_grid.last().expect("validated");
    let master = master_dataset(&cfg.model, n_max, cfg.seed)?;
    let mut rows = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let model = build_model(&cfg.model, master.prefix(n)?)?;
        let mode = model.find_mode(cfg.mode_tol, MODE_MAX_ITERS)?;
        let gamma = cfg.step_rule.gamma(model.dataset());
        let laplace = GaussianSummary::analytic(mode.clone(), inverse_spd(&model.hessian_at(&mode))?)?;
        for (ki, &kind) in cfg.kinds.iter().enumerate() {
            let results: Vec<Result<ChainOutput>> = (0..cfg.replicas)
                .into_par_iter()
                .map(|r| run_chain(&model, &chain_config(cfg, kind, gamma, &mode, chain_id(ni, ki, r))))
                .collect();
            let outs = match split_divergence(results)? {
                Ok(o) => o,
                Err(it) => {
                    rows.push(f.row(kind.name(), n, gamma, "diverged_at_iteration", it as f64, 0.0));
                    continue;
                }
            };
            if fig1 {
                let d = model.dim();
                let means: Vec<DVector<f64>> = outs.iter().map(|o| o.moments.mean().clone()).collect();
                let avg = means.iter().fold(DVector::zeros(d), |a, m| a + m) / outs.len() as f64;
                let spread: f64 = if outs.len() > 1 {
                    means.iter().map(|m| (m - &avg).norm_squared()).sum::<f64>() / (outs.len() as f64 - 1.0)
                } else {
                    0.0
                };
                let per: Vec<f64> = means.iter().map(|m| (m - &mode).norm()).collect();
                let (m, se) = mean_and_stderr(&per);
                rows.push(f.row(kind.name(), n, gamma, "bias_norm", m, se));
                rows.push(f.row(
                    kind.name(),
                    n,
                    gamma,
                    "bias_norm_of_mean",
                    (&avg - &mode).norm(),
                    (spread / outs.len() as f64).sqrt(),
                ));
            } else {
                let mut traces = Vec::with_capacity(outs.len());
                let mut w2s = Vec::with_capacity(outs.len());
                for o in &outs {
                    let s = o.moments.summary()?;
                    traces.push(s.cov_matrix().trace());
                    w2s.push(w2_gaussian(&s, &laplace)?);
                }
                let (m, se) = mean_and_stderr(&traces);
                rows.push(f.row(kind.name(), n, gamma, "cov_trace", m, se));
                let (m, se) = mean_and_stderr(&w2s);
                rows.push(f.row(kind.name(), n, gamma, "w2_lower_bound_to_laplace", m, se));
            }
        }
    }
    let names: Vec<String> = cfg.kinds.iter().map(|k| k.name().to_owned()).collect();
    if fig1 {
        push_slopes(&mut rows, &f, &names, "bias_norm");
    } else {
        push_slopes(&mut rows, &f, &names, "cov_trace");
    }
    let notes = vec![
        "theta_star is the mode found per truncated N; chains start there".into(),
        "bias_norm is the replica average of |chain mean - mode|; bias_norm_of_mean is |replica-averaged mean - mode|".into(),
        "w2 values are Gelbrich lower bounds between Gaussian moment summaries".into(),
        format!("step rule {} evaluated per truncated N", cfg.step_rule.name()),
    ];
    Ok((rows, notes))
}

fn inverse_spd(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(h.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular("hessian at the mode".into()))
}

/// fig3: mean-over-dimensions variance of each kind's gradient estimator.
fn grad_variance(cfg: &ExperimentConfig) -> Result<(Vec<MetricRow>, Vec<String>)> {
    let f = RowFactory { cfg };
    let n_max = *cfg.n_grid.last().expect("validated");
    let master = master_dataset(&cfg.model, n_max, cfg.seed)?;
    let mut rows = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let model = build_model(&cfg.model, master.prefix(n)?)?;
        let mode = model.find_mode(cfg.mode_tol, MODE_MAX_ITERS)?;
        let gamma = cfg.step_rule.gamma(model.dataset());
        for (ki, &kind) in cfg.kinds.iter().enumerate() {
            let kernel = Kernel::new(&model, kind, gamma, cfg.p, Some(&mode))?;
            let estimator = kernel.estimator();

            let mut rng = derive_stream(cfg.seed, chain_id(ni, ki, cfg.replicas), StreamPurpose::Diagnostics);
            let at_mode = empirical_gradient_variance(&model, &mode, estimator, cfg.p, cfg.grad_draws * cfg.grad_points, &mut rng)?;
            rows.push(f.row(kind.name(), n, gamma, "grad_variance_at_mode", at_mode.mean, 0.0));

            let results: Vec<Result<f64>> = (0..cfg.replicas)
                .into_par_iter()
                .map(|r| {
                    let id = chain_id(ni, ki, r);
                    let chain = chain_config(cfg, kind, gamma, &mode, id);
                    let n_burn = chain.n_burn_in();
                    let n_kept = chain.n_kept();
                    let marks: Vec<usize> = (1..=cfg.grad_points)
                        .map(|j| n_burn + (j * n_kept).div_ceil(cfg.grad_points))
                        .collect();
                    let mut points = Vec::with_capacity(marks.len());
                    run_chain_observed(&model, &chain, |k, theta| {
                        if marks.contains(&k) {
                            points.push(DVector::from_column_slice(theta));
                        }
                    })?;
                    let mut rng = derive_stream(cfg.seed, id, StreamPurpose::Diagnostics);
                    let mut acc = 0.0;
                    for theta in &points {
                        acc += empirical_gradient_variance(&model, theta, estimator, cfg.p, cfg.grad_draws, &mut rng)?.mean;
                    }
                    Ok(acc / points.len().max(1) as f64)
                })
                .collect();
            let mut values = Vec::with_capacity(results.len());
            let mut diverged = None;
            for r in results {
                match r {
                    Ok(v) => values.push(v),
                    Err(Error::Divergence { iteration, .. }) => diverged = Some(diverged.map_or(iteration, |d: usize| d.min(iteration))),
                    Err(e) => return Err(e),
                }
            }
            if let Some(it) = diverged {
                rows.push(f.row(kind.name(), n, gamma, "diverged_at_iteration", it as f64, 0.0));
                continue;
            }
            let (m, se) = mean_and_stderr(&values);
            rows.push(f.row(kind.name(), n, gamma, "grad_variance", m, se));
        }
    }
    let names: Vec<String> = cfg.kinds.iter().map(|k| k.name().to_owned()).collect();
    push_slopes(&mut rows, &f, &names, "grad_variance");
    push_slopes(&mut rows, &f, &names, "grad_variance_at_mode");
    let notes = vec![
        "grad_variance is evaluated at evenly spaced post-burn-in iterates of each kind's own chain".into(),
        "grad_variance_at_mode is evaluated at the mode; it is identically zero for SGLDFP".into(),
        "values are per-coordinate unbiased variances averaged over dimensions".into(),
    ];
    Ok((rows, notes))
}

/// fig4: held-out negative log-likelihood per iteration block.
fn test_nll(cfg: &ExperimentConfig) -> Result<(Vec<MetricRow>, Vec<String>)> {
    let f = RowFactory { cfg };
    let n_max = *cfg.n_grid.last().expect("validated");
    let wanted = (n_max as f64 / (1.0 - cfg.test_fraction)).ceil() as usize;
    let master = master_dataset(&cfg.model, wanted, cfg.seed)?;
    let total = master.n_data();
    let n_test = ((total as f64) * cfg.test_fraction).floor().max(1.0) as usize;
    let (pool, test) = master.split_at(total - n_test)?;
    if pool.n_data() < n_max {
        return Err(Error::InvalidDataset(format!("training pool has {} rows, {} needed", pool.n_data(), n_max)));
    }
    let test_model = build_model(&cfg.model, test)?;
    let per_datum = |theta: &[f64]| test_model.neg_log_likelihood(&DVector::from_column_slice(theta)) / n_test as f64;
    let blocks = cfg.nll_blocks;
    let mut rows = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let model = build_model(&cfg.model, pool.prefix(n)?)?;
        let mode = model.find_mode(cfg.mode_tol, MODE_MAX_ITERS)?;
        let gamma = cfg.step_rule.gamma(model.dataset());
        rows.push(f.row("MODE", n, gamma, "test_nll", per_datum(mode.as_slice()), 0.0));
        for (ki, &kind) in cfg.kinds.iter().enumerate() {
            let results: Vec<Result<Vec<f64>>> = (0..cfg.replicas)
                .into_par_iter()
                .map(|r| {
                    let chain = chain_config(cfg, kind, gamma, &mode, chain_id(ni, ki, r));
                    let n_iters = chain.n_iters.max(1);
                    let stride = (n_iters / (blocks * 10)).max(1);
                    let mut sums = vec![0.0; blocks];
                    let mut counts = vec![0usize; blocks];
                    run_chain_observed(&model, &chain, |k, theta| {
                        if k % stride == 0 || k == n_iters {
                            let b = ((k - 1) * blocks / n_iters).min(blocks - 1);
                            sums[b] += per_datum(theta);
                            counts[b] += 1;
                        }
                    })?;
                    Ok(sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect())
                })
                .collect();
            let mut curves = Vec::new();
            let mut diverged = None;
            for r in results {
                match r {
                    Ok(v) => curves.push(v),
                    Err(Error::Divergence { iteration, .. }) => diverged = Some(diverged.map_or(iteration, |d: usize| d.min(iteration))),
                    Err(e) => return Err(e),
                }
            }
            if let Some(it) = diverged {
                rows.push(f.row(kind.name(), n, gamma, "diverged_at_iteration", it as f64, 0.0));
                continue;
            }
            for b in 0..blocks {
                let vals: Vec<f64> = curves.iter().map(|c| c[b]).filter(|v| v.is_finite()).collect();
                if vals.is_empty() {
                    continue;
                }
                let (m, se) = mean_and_stderr(&vals);
                rows.push(f.row(kind.name(), n, gamma, &format!("test_nll_block_{b:02}"), m, se));
                if b == blocks - 1 {
                    rows.push(f.row(kind.name(), n, gamma, "test_nll_final", m, se));
                }
            }
        }
    }
    let notes = vec![
        format!("test split: last {:.0}% of the master dataset rows, not shuffled", 100.0 * cfg.test_fraction),
        "test_nll is the per-datum held-out negative log-likelihood averaged over iterates in each block".into(),
        "blocks partition iterations 1..n evenly, burn-in included".into(),
    ];
    Ok((rows, notes))
}

fn linear_model(cfg: &ExperimentConfig) -> Result<PosteriorModel> {
    if !matches!(cfg.model, ModelSpec::Linear { .. }) {
        return Err(Error::WrongModelKind { expected: "linear_regression" });
    }
    let ds = master_dataset(&cfg.model, 0, cfg.seed)?;
    build_model(&cfg.model, ds)
}

/// oracle_linreg: closed-form stationary covariances against long chains.
fn oracle_linreg(cfg: &ExperimentConfig) -> Result<(Vec<MetricRow>, Vec<String>)> {
    let f = RowFactory { cfg };
    let model = linear_model(cfg)?;
    let n = model.n_data();
    let d = model.dim();
    let gamma = cfg.step_rule.gamma(model.dataset());
    let oracle = LinRegOracle::new(&model, cfg.p)?;
    let star = oracle.theta_star.clone();
    let mut rows = Vec::new();
    let mut closed = Vec::new();
    for (ki, &kind) in cfg.kinds.iter().enumerate() {
        let cov = oracle.stationary_cov(kind, gamma)?;
        for j in 0..d {
            rows.push(f.row(kind.name(), n, gamma, &format!("closed_form_var_{j}"), cov[(j, j)], 0.0));
        }
        if d == 1 && matches!(kind, SamplerKind::Sgld | SamplerKind::Sgldfp) {
            if let Ok(m) = sgld_1d_stationary_moments(&model, gamma, cfg.p, kind) {
                rows.push(f.row(kind.name(), n, gamma, "recursion_var_0", m.stationary_variance, 0.0));
            }
        }
        closed.push((kind, cov));

        let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..cfg.replicas)
            .into_par_iter()
            .map(|r| {
                let mut chain = chain_config(cfg, kind, gamma, &star, chain_id(0, ki, r));
                chain.check_step_bound = true;
                chain.keep_samples = true;
                let out = run_chain(&model, &chain)?;
                let samples = out.samples.expect("samples kept");
                let mean = out.moments.mean().clone();
                let mut est = Vec::with_capacity(d);
                let mut ses = Vec::with_capacity(d);
                for j in 0..d {
                    let series: Vec<f64> = samples.iter().map(|s| (s[j] - mean[j]).powi(2)).collect();
                    let (v, se) = batch_means(&series, cfg.n_batches)?;
                    // Undo the n/(n-1) gap between the plain mean of squares and
                    // the unbiased estimator so both columns agree exactly.
                    let k = samples.len() as f64;
                    est.push(v * k / (k - 1.0));
                    ses.push(se);
                }
                Ok((est, ses))
            })
            .collect();
        let results: Vec<(Vec<f64>, Vec<f64>)> = results.into_iter().collect::<Result<_>>()?;
        let r = results.len() as f64;
        for j in 0..d {
            let v = results.iter().map(|x| x.0[j]).sum::<f64>() / r;
            let se = results.iter().map(|x| x.1[j].powi(2)).sum::<f64>().sqrt() / r;
            rows.push(f.row(kind.name(), n, gamma, &format!("empirical_var_{j}"), v, se));
        }
    }
    let find = |k: SamplerKind| closed.iter().find(|c| c.0 == k).map(|c| c.1.clone());
    if let (Some(a), Some(b)) = (find(SamplerKind::Sgld), find(SamplerKind::Sgldfp)) {
        let w = w2_gaussian(&GaussianSummary::analytic(star.clone(), a)?, &GaussianSummary::analytic(star.clone(), b)?)?;
        rows.push(f.row("SGLD_vs_SGLDFP", n, gamma, "w2_lower_bound", w, 0.0));
    }
    let notes = vec![
        "chains start at theta_star; empirical variances use batch-means standard errors".into(),
        format!("{} contiguous batches per chain", cfg.n_batches),
        "w2_lower_bound is the Gelbrich bound between the closed-form Gaussian summaries".into(),
    ];
    Ok((rows, notes))
}

/// coupling_contraction: synchronously coupled same-kind chains against the
/// contraction rate, plus the SGLD/SGD plateau.
fn coupling(cfg: &ExperimentConfig) -> Result<(Vec<MetricRow>, Vec<String>)> {
    let f = RowFactory { cfg };
    let model = linear_model(cfg)?;
    let n = model.n_data();
    let d = model.dim();
    let gamma = cfg.step_rule.gamma(model.dataset());
    let constants = model.lipschitz_constants()?;
    let (m, l) = (constants.m, constants.l);
    let rate = 1.0 - 2.0 * m * gamma * (1.0 - gamma * l / 2.0);
    let star = model.linreg_posterior_params()?.theta_star;
    let offset = DVector::from_element(d, 1.0);
    let init_a = &star + &offset;
    let init_b = &star - &offset;
    let n_iters = cfg.n_iters.unwrap_or_else(|| (1.0 / gamma).ceil() as usize);
    let coupling = CouplingConfig {
        gamma,
        p: cfg.p,
        n_iters,
        n_replicas: cfg.replicas,
        seed: cfg.seed,
        center: Some(star.as_slice().to_vec()),
    };
    let d0 = (&init_a - &init_b).norm_squared();
    let scale = 1.0 + init_a.norm().max(init_b.norm());
    let checkpoints: Vec<usize> = {
        let mut c: Vec<usize> = (0..=10).map(|j| j * n_iters / 10).collect();
        c.dedup();
        c
    };
    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        let trace = run_coupled_chains(&model, kind, kind, &coupling, &init_a, &init_b)?;
        let mut violations = 0usize;
        for k in 0..=n_iters {
            let bound = rate.powi(k as i32) * d0;
            // Each step can add about one ulp of the iterate to the difference.
            let slack = (k as f64 + 1.0) * 4.0 * f64::EPSILON * scale;
            let allowed = (bound.sqrt() + slack).powi(2);
            if trace.mean_sq_dist[k] > allowed + 3.0 * trace.stderr[k] {
                violations += 1;
            }
        }
        for &k in &checkpoints {
            rows.push(f.row(kind.name(), n, gamma, &format!("mean_sq_dist_k{k}"), trace.mean_sq_dist[k], trace.stderr[k]));
            rows.push(f.row(kind.name(), n, gamma, &format!("rate_bound_k{k}"), rate.powi(k as i32) * d0, 0.0));
        }
        rows.push(f.row(kind.name(), n, gamma, "bound_violations_3se", violations as f64, 0.0));
    }
    let plateau = run_coupled_chains(&model, SamplerKind::Sgld, SamplerKind::Sgd, &coupling, &star, &star)?;
    let tail = (n_iters / 10).max(1);
    let vals = &plateau.mean_sq_dist[n_iters + 1 - tail..];
    let se = plateau.stderr[n_iters + 1 - tail..].iter().sum::<f64>() / tail as f64;
    rows.push(f.row("SGLD_vs_SGD", n, gamma, "plateau_mean_sq_dist", vals.iter().sum::<f64>() / tail as f64, se));
    rows.push(f.row("SGLD_vs_SGD", n, gamma, "plateau_bound", 2.0 * d as f64 / m, 0.0));
    let notes = vec![
        format!("contraction rate {rate} from m = {m}, L = {l}"),
        "each replica shares one Gaussian and one minibatch stream between both chains".into(),
        "plateau is the mean squared distance over the last 10% of iterations".into(),
    ];
    Ok((rows, notes))
}
