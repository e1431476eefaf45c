use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sgldfp_core::harness::{
    parse_libsvm, run_experiment, simulate_logistic_dataset, write_csv, ExperimentConfig, ExperimentKind, ModelSpec, StepRule,
};
use sgldfp_core::stationary::sgld_1d_stationary_moments;
use sgldfp_core::{run_chain, ChainConfig, Dataset, LinRegOracle, PosteriorModel, Result, SamplerKind};

#[derive(Parser)]
#[command(name = "sgldfp", version, about = "Constant step-size Langevin samplers and their stationary moments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a logistic-regression dataset and write it in libsvm format.
    Simulate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long)]
        seed: u64,
        /// Comma-separated true parameter; drawn from the seed when absent.
        #[arg(long, value_delimiter = ',')]
        theta_true: Option<Vec<f64>>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run one chain on a logistic model and print its moment summary as JSON.
    Sample(SampleArgs),
    /// Closed-form stationary covariances for a linear-regression dataset.
    Oracle(OracleArgs),
    /// Run an experiment and write CSV plus JSON.
    Sweep(SweepArgs),
    /// Parse a libsvm file and report its shape.
    ParseData {
        #[arg(long)]
        path: PathBuf,
    },
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    kind: SamplerKind,
    /// libsvm file; a simulated dataset is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    simulate_n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    prior_variance: f64,
    /// Step size; defaults to 1/N.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long)]
    n_iters: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    burn_in_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    /// Comma-separated scalar covariates (d = 1); the two-point fixture by default.
    #[arg(long, value_delimiter = ',')]
    x: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    y: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.0)]
    noise_variance: f64,
    #[arg(long, default_value_t = 1.0)]
    prior_variance: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 1)]
    p: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    experiment: Option<ExperimentKind>,
    #[arg(long)]
    seed: u64,
    /// JSON config; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// Use gamma = eta / N.
    #[arg(long, conflicts_with_all = ["spectral", "inverse_n", "gamma"])]
    eta: Option<f64>,
    #[arg(long)]
    spectral: bool,
    #[arg(long)]
    inverse_n: bool,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<SamplerKind>>,
    #[arg(long)]
    n_iters: Option<usize>,
    #[arg(long)]
    burn_in_fraction: Option<f64>,
    /// Covertype-style libsvm file for logistic experiments.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { n, d, seed, theta_true, output } => {
            let (ds, theta) = simulate_logistic_dataset(n, d, seed, theta_true.as_deref())?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(&output)?);
            for r in 0..ds.n_data() {
                write!(f, "{}", ds.response(r) as i64)?;
                for (j, v) in ds.row(r).iter().enumerate() {
                    write!(f, " {}:{v:e}", j + 1)?;
                }
                writeln!(f)?;
            }
            f.flush()?;
            print_json(&json!({ "rows": n, "dim": d, "theta_true": theta, "output": output }))
        }
        Command::Sample(a) => sample(a),
        Command::Oracle(a) => oracle(a),
        Command::Sweep(a) => sweep(a),
        Command::ParseData { path } => {
            let parsed = parse_libsvm(&path)?;
            let positives = parsed.dataset.responses().iter().filter(|&&y| y == 1.0).count();
            print_json(&json!({
                "rows": parsed.n_rows,
                "max_feature_index": parsed.max_feature_index,
                "raw_labels": parsed.raw_labels,
                "positive_rows": positives,
            }))
        }
    }
}

fn sample(a: SampleArgs) -> Result<()> {
    let ds = match &a.data {
        Some(path) => parse_libsvm(path)?.dataset,
        None => simulate_logistic_dataset(a.simulate_n, a.d, a.seed, None)?.0,
    };
    let model = PosteriorModel::logistic(ds, a.prior_variance)?;
    let mode = model.find_mode(1e-9, 500)?;
    let gamma = a.gamma.unwrap_or(1.0 / model.n_data() as f64);
    let mut cfg = ChainConfig::new(a.kind, gamma, mode.as_slice().to_vec());
    cfg.p = a.p;
    cfg.seed = a.seed;
    cfg.burn_in_fraction = a.burn_in_fraction;
    cfg.center = Some(mode.as_slice().to_vec());
    cfg.check_step_bound = false;
    if let Some(n) = a.n_iters {
        cfg.n_iters = n;
    }
    let out = run_chain(&model, &cfg)?;
    let summary = out.moments.summary()?;
    print_json(&json!({
        "kind": a.kind,
        "N": model.n_data(),
        "gamma": gamma,
        "p": a.p,
        "n_iters": cfg.n_iters,
        "n_kept": out.n_kept,
        "mode": mode.as_slice(),
        "mean": summary.mean,
        "cov": summary.cov,
        "final_state": out.final_state.as_slice(),
    }))
}

fn oracle(a: OracleArgs) -> Result<()> {
    let (x, y) = match (a.x, a.y) {
        (Some(x), Some(y)) => (x, y),
        (None, None) => (vec![1.0, 1.0], vec![0.0, 1.0]),
        _ => return Err(sgldfp_core::Error::InvalidParameter("--x and --y go together".into())),
    };
    let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
    let model = PosteriorModel::linear(Dataset::from_rows(&rows, y)?, a.noise_variance, a.prior_variance)?;
    let oracle = LinRegOracle::new(&model, a.p)?;
    let mut covs = serde_json::Map::new();
    for kind in SamplerKind::ALL {
        let c = oracle.stationary_cov(kind, a.gamma)?;
        covs.insert(kind.name().into(), json!(c[(0, 0)]));
    }
    let rec = |kind| sgld_1d_stationary_moments(&model, a.gamma, a.p, kind).ok();
    print_json(&json!({
        "sigma": oracle.sigma[(0, 0)],
        "theta_star": oracle.theta_star[0],
        "T": oracle.t_op.matrix()[(0, 0)],
        "M": oracle.m[(0, 0)],
        "gamma": a.gamma,
        "p": a.p,
        "stationary_variance": covs,
        "recursion": { "SGLD": rec(SamplerKind::Sgld), "SGLDFP": rec(SamplerKind::Sgldfp) },
    }))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = match (&a.config, a.experiment) {
        (Some(path), _) => ExperimentConfig::from_json_file(path)?,
        (None, Some(kind)) => ExperimentConfig::desk(kind, a.seed),
        (None, None) => return Err(sgldfp_core::Error::InvalidParameter("give --experiment or --config".into())),
    };
    if let (Some(_), Some(kind)) = (&a.config, a.experiment) {
        cfg.experiment = kind;
    }
    cfg.seed = a.seed;
    if let Some(g) = a.n_grid {
        cfg.n_grid = g;
    }
    if let Some(r) = a.replicas {
        cfg.replicas = r;
    }
    if let Some(p) = a.p {
        cfg.p = p;
    }
    if let Some(eta) = a.eta {
        cfg.step_rule = StepRule::EtaOverN { eta };
    } else if a.spectral {
        cfg.step_rule = StepRule::Spectral;
    } else if a.inverse_n {
        cfg.step_rule = StepRule::InverseN;
    } else if let Some(gamma) = a.gamma {
        cfg.step_rule = StepRule::Fixed { gamma };
    }
    if let Some(k) = a.kinds {
        cfg.kinds = k;
    }
    if a.n_iters.is_some() {
        cfg.n_iters = a.n_iters;
    }
    if let Some(b) = a.burn_in_fraction {
        cfg.burn_in_fraction = b;
    }
    if let Some(path) = a.data {
        cfg.model = ModelSpec::LibsvmLogistic { path, prior_variance: 1.0 };
    }
    cfg.output = a.output;
    let record = run_experiment(&cfg)?;
    if cfg.output.is_none() {
        write_csv(&record.rows, std::io::stdout().lock())?;
    }
    eprintln!("{} rows in {:.2}s", record.rows.len(), record.wall_clock_seconds);
    Ok(())
}
