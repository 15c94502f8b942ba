//! Command-line entry point wiring every module: train, eval, forecast,
//! decompose, gradcheck, bench, and ablate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. All emitted files land under the output directory (`--out`,
//! or the TIMECAPSULE_OUT environment variable, or the working directory).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{self, ConfigError};
use crate::data::DataError;
use crate::graph::Graph;
use crate::model::{self, CapsuleModel, ModelConfig, ModelError};
use crate::nn::ParamStore;
use crate::tensor::Tensor3;
use crate::train::{self, Baseline, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser)]
#[command(
    name = "timecapsule",
    about = "Long-term multivariate time series forecasting with compressed 3D tensor representations",
    version
)]
struct Cli {
    /// Flat key=value config file with dotted keys (e.g. model.d = 64).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set model.d=64. Wins over the file.
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
    /// Output directory for logs, checkpoints, and CSV exports.
    #[arg(long, global = true, env = "TIMECAPSULE_OUT")]
    out: Option<PathBuf>,
    /// Verbose progress output on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, logs, and metrics.
    Train,
    /// Evaluate a checkpoint (or a fresh init) on the test split.
    Eval {
        /// Checkpoint manifest path; omitted = seeded random init.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Forecast the horizon after the last lookback window (raw scale).
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export the learned level decomposition of the last lookback window.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient checks on primitives and a tiny model.
    Gradcheck,
    /// Report parameter and FLOP counts for the configured model.
    Bench,
    /// Train all variants along one ablation axis and tabulate metrics.
    Ablate {
        /// One of: residual_info, noise, positional_encoding,
        /// compression_dims, jepa.
        #[arg(long)]
        axis: String,
    },
}

/// Classified failure carrying its exit code.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(EXIT_CONFIG, format!("config error: {e}"))
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Data(_) => EXIT_DATA,
            TrainError::Diverged { .. } => EXIT_NUMERIC,
            TrainError::Graph(_) | TrainError::Optim(_) => EXIT_NUMERIC,
            TrainError::Model(_) | TrainError::InvalidConfig(_) => EXIT_CONFIG,
        };
        Failure::new(code, format!("{e}"))
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::new(EXIT_DATA, format!("data error: {e}"))
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new(EXIT_CONFIG, format!("model error: {e}"))
    }
}

impl From<checkpoint::CheckpointError> for Failure {
    fn from(e: checkpoint::CheckpointError) -> Self {
        Failure::new(EXIT_DATA, format!("checkpoint error: {e}"))
    }
}

impl From<crate::tensor::TensorError> for Failure {
    fn from(e: crate::tensor::TensorError) -> Self {
        Failure::new(EXIT_NUMERIC, format!("tensor error: {e}"))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(EXIT_DATA, format!("io error: {e}"))
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/usage; keep its exit semantics for
            // --help/--version, everything else is a config error
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf, Failure> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Default run configuration: ETTh1-shaped 512 -> 96 forecasting.
fn default_config() -> TrainConfig {
    TrainConfig::new(PathBuf::from("data/ETTh1.csv"), ModelConfig::new(7, 512, 96))
}

fn build_config(cli: &Cli) -> Result<TrainConfig, Failure> {
    let mut cfg = default_config();
    if let Some(path) = &cli.config {
        config::apply_file(&mut cfg, path)?;
    }
    config::apply_overrides(&mut cfg, &cli.sets)?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Eval { checkpoint } => cmd_eval(cli, checkpoint.as_deref()),
        Command::Forecast { checkpoint } => cmd_forecast(cli, checkpoint),
        Command::Decompose { checkpoint } => cmd_decompose(cli, checkpoint),
        Command::Gradcheck => cmd_gradcheck(cli),
        Command::Bench => cmd_bench(cli),
        Command::Ablate { axis } => cmd_ablate(cli, axis),
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn metrics_json(m: &train::Metrics) -> serde_json::Value {
    serde_json::json!({
        "mse": m.mse,
        "mae": m.mae,
        "windows": m.windows,
        "per_horizon": m.per_horizon,
    })
}

fn cmd_train(cli: &Cli) -> Result<(), Failure> {
    let cfg = build_config(cli)?;
    let out = out_dir(cli)?;
    if cli.verbose {
        eprintln!("training on {} ...", cfg.data_path.display());
    }
    let (outcome, prepared) = train::train(&cfg)?;
    let test = train::evaluate(&outcome.model, &outcome.store, &prepared.test)?;
    let c = &cfg.model;
    let repeat = train::baseline_metrics(&prepared.test, c.t_x, c.t_y, Baseline::RepeatLast)?;
    let seasonal = train::baseline_metrics(
        &prepared.test,
        c.t_x,
        c.t_y,
        Baseline::SeasonalNaive { period: 24 },
    )?;

    train::write_logs(&out.join("logs.csv"), &outcome.logs)?;
    let cfg_json = serde_json::to_value(&cfg)
        .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    checkpoint::save(&out.join("model.json"), &outcome.store, cfg_json)?;

    let summary = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "best_val_mse": outcome.best_val_mse,
        "test": metrics_json(&test),
        "baseline_repeat_last": metrics_json(&repeat),
        "baseline_seasonal_naive": metrics_json(&seasonal),
    });
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    println!(
        "test mse {:.6} mae {:.6} | repeat-last {:.6}/{:.6} | seasonal-naive {:.6}/{:.6}",
        test.mse, test.mae, repeat.mse, repeat.mae, seasonal.mse, seasonal.mae
    );
    Ok(())
}

/// Rebuilds a model and store for `cfg`, optionally loading a checkpoint.
fn restore_model(
    cfg: &TrainConfig,
    ckpt: Option<&Path>,
) -> Result<(CapsuleModel, ParamStore), Failure> {
    let seeds = train::derive_seeds(cfg.seed);
    let mut store = ParamStore::new(seeds.init);
    let model = CapsuleModel::new(cfg.model.clone(), &mut store)?;
    if let Some(path) = ckpt {
        checkpoint::load(path, &mut store)?;
    }
    Ok((model, store))
}

/// Eval config: the checkpoint's embedded snapshot unless an explicit
/// config file is given; --set overrides always apply on top.
fn config_for_checkpoint(cli: &Cli, ckpt: &Path) -> Result<TrainConfig, Failure> {
    let mut cfg = if cli.config.is_some() {
        let mut c = default_config();
        config::apply_file(&mut c, cli.config.as_ref().unwrap())?;
        c
    } else {
        let manifest = checkpoint::load_manifest(ckpt)?;
        serde_json::from_value(manifest.config)
            .map_err(|e| Failure::new(EXIT_CONFIG, format!("checkpoint config: {e}")))?
    };
    config::apply_overrides(&mut cfg, &cli.sets)?;
    Ok(cfg)
}

fn cmd_eval(cli: &Cli, ckpt: Option<&Path>) -> Result<(), Failure> {
    let cfg = match ckpt {
        Some(p) => config_for_checkpoint(cli, p)?,
        None => build_config(cli)?,
    };
    let out = out_dir(cli)?;
    let prepared = train::prepare(&cfg)?;
    let (model, store) = restore_model(&cfg, ckpt)?;
    let test = train::evaluate(&model, &store, &prepared.test)?;
    let c = &cfg.model;
    let repeat = train::baseline_metrics(&prepared.test, c.t_x, c.t_y, Baseline::RepeatLast)?;
    let seasonal = train::baseline_metrics(
        &prepared.test,
        c.t_x,
        c.t_y,
        Baseline::SeasonalNaive { period: 24 },
    )?;
    let summary = serde_json::json!({
        "test": metrics_json(&test),
        "baseline_repeat_last": metrics_json(&repeat),
        "baseline_seasonal_naive": metrics_json(&seasonal),
    });
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    println!(
        "test mse {:.6} mae {:.6} | repeat-last {:.6}/{:.6} | seasonal-naive {:.6}/{:.6}",
        test.mse, test.mae, repeat.mse, repeat.mae, seasonal.mse, seasonal.mae
    );
    Ok(())
}

fn cmd_forecast(cli: &Cli, ckpt: &Path) -> Result<(), Failure> {
    use std::io::Write;
    let cfg = config_for_checkpoint(cli, ckpt)?;
    let out = out_dir(cli)?;
    let prepared = train::prepare(&cfg)?;
    let (model, store) = restore_model(&cfg, Some(ckpt))?;
    let c = &cfg.model;

    // last lookback window of the standardized test split
    let test = &prepared.test;
    let start = test.rows - c.t_x;
    let mut x = vec![0.0; c.v * c.t_x];
    for i in 0..c.v {
        for j in 0..c.t_x {
            x[i * c.t_x + j] = test.get(start + j, i);
        }
    }
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward(&mut g, &store, &x, false, &mut rng, None)?;
    let y = g.data(fwd.y_hat);

    let path = out.join("forecast.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "step,{}", test.names.join(","))?;
    for j in 0..c.t_y {
        let row: Vec<String> = (0..c.v)
            .map(|i| {
                // back to the raw data scale
                let raw = y[i * c.t_y + j] * prepared.scaler.std[i] + prepared.scaler.mean[i];
                format!("{raw:.6}")
            })
            .collect();
        writeln!(f, "{},{}", j + 1, row.join(","))?;
    }
    println!("wrote {} ({} steps)", path.display(), c.t_y);
    Ok(())
}

fn cmd_decompose(cli: &Cli, ckpt: &Path) -> Result<(), Failure> {
    use std::io::Write;
    let cfg = config_for_checkpoint(cli, ckpt)?;
    let out = out_dir(cli)?;
    let prepared = train::prepare(&cfg)?;
    let (model, store) = restore_model(&cfg, Some(ckpt))?;
    let c = &cfg.model;

    let test = &prepared.test;
    let start = test.rows - c.t_x;
    let mut x = vec![0.0; c.v * c.t_x];
    for i in 0..c.v {
        for j in 0..c.t_x {
            x[i * c.t_x + j] = test.get(start + j, i);
        }
    }
    let tensor = Tensor3::new((c.v, c.t_x, 1), x)?;
    let m_l = model.level_factor(&store);
    let (subs, _, sum_mk) = model::decompose_levels(&tensor, &m_l)?;

    let path = out.join("decompose.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "level,step,{}", test.names.join(","))?;
    for (k, sub) in subs.iter().enumerate() {
        for j in 0..c.t_x {
            let row: Vec<String> = (0..c.v)
                .map(|i| format!("{:.6}", sub.get(i, j, 0)))
                .collect();
            writeln!(f, "{},{},{}", k, j + 1, row.join(","))?;
        }
    }
    println!("wrote {} ({} levels), sum_mk = {:.6}", path.display(), subs.len(), sum_mk);
    Ok(())
}

/// Gradient-check reference config: small enough for exhaustive
/// coordinate-wise finite differences.
pub fn gradcheck_reference_config() -> ModelConfig {
    let mut c = ModelConfig::new(3, 16, 8);
    c.t_c = 4;
    c.l = 2;
    c.v_c = 2;
    c.d = 8;
    c.heads = 2;
    c.d_ff = 16;
    c.t_e = 32;
    c.l_e = 2;
    c.v_e = 6;
    c.use_noise = false;
    c
}

/// Runs the full finite-difference suite; returns the max relative error.
pub fn gradcheck_suite() -> Result<f64, String> {
    use crate::gradcheck::{grad_check, DEFAULT_H};
    use crate::nn::{Init, Linear, TransformerLayer};
    let fail = |e: crate::gradcheck::GradCheckError| format!("gradcheck: {e}");
    let mut worst: f64 = 0.0;

    // linear + GELU + huber
    let mut s = ParamStore::new(11);
    let lin = Linear::register(&mut s, "lin", 4, 3);
    let err = grad_check(&mut s, DEFAULT_H, |g, store| {
        let x = g.constant(vec![0.3, -0.8, 0.5, 1.2, -0.1, 0.9, 0.2, -1.1], 2, 4);
        let y = lin.forward(g, store, x)?;
        let act = g.gelu(y);
        let target = g.constant(vec![0.1; 6], 2, 3);
        g.huber(act, target, 1.0)
    })
    .map_err(fail)?;
    worst = worst.max(err);

    // transformer layer
    let mut s = ParamStore::new(13);
    let layer = TransformerLayer::register(&mut s, "layer", 8, 2, 16);
    let err = grad_check(&mut s, DEFAULT_H, |g, store| {
        let x = g.constant((0..24).map(|i| (i as f64 * 0.37).sin()).collect(), 3, 8);
        let y = layer.forward(g, store, x)?;
        Ok(g.mean(y))
    })
    .map_err(fail)?;
    worst = worst.max(err);

    // attention softmax path through a scalar
    let mut s = ParamStore::new(17);
    let p = s.register("p", &[2, 2], Init::UniformFanIn(2));
    let err = grad_check(&mut s, DEFAULT_H, |g, store| {
        let x = g.param(store, p, 2, 2);
        let sm = g.softmax_rows(x);
        Ok(g.sum(sm))
    })
    .map_err(fail)?;
    worst = worst.max(err);

    // composed tiny model end to end
    let cfg = gradcheck_reference_config();
    let mut s = ParamStore::new(2021);
    let model = CapsuleModel::new(cfg.clone(), &mut s).map_err(|e| e.to_string())?;
    let window: Vec<f64> = (0..cfg.v * cfg.t_x)
        .map(|i| (i as f64 * 0.13).sin() + 0.1 * (i as f64 * 0.07).cos())
        .collect();
    let target: Vec<f64> = (0..cfg.v * cfg.t_y).map(|i| (i as f64 * 0.21).cos()).collect();
    let err = grad_check(&mut s, DEFAULT_H, |g, store| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model
            .forward(g, store, &window, false, &mut rng, None)
            .map_err(|e| crate::graph::GraphError::ShapeMismatch {
                op: "model",
                detail: e.to_string(),
            })?;
        let t = g.constant(target.clone(), cfg.v, cfg.t_y);
        g.huber(out.y_hat, t, 1.0)
    })
    .map_err(fail)?;
    worst = worst.max(err);

    Ok(worst)
}

fn cmd_gradcheck(_cli: &Cli) -> Result<(), Failure> {
    let worst = gradcheck_suite().map_err(|m| Failure::new(EXIT_NUMERIC, m))?;
    println!("max relative error {worst:.3e}");
    if worst < 1e-5 {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_NUMERIC,
            format!("gradient check failed: max rel error {worst:.3e} >= 1e-5"),
        ))
    }
}

fn cmd_bench(cli: &Cli) -> Result<(), Failure> {
    let cfg = build_config(cli)?;
    cfg.model.validate()?;
    let params = model::count_params(&cfg.model);
    let flops = model::count_flops(&cfg.model);
    let report = serde_json::json!({
        "params": params,
        "forward_flops_per_window": flops,
        "model": serde_json::to_value(&cfg.model).unwrap(),
    });
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn cmd_ablate(cli: &Cli, axis: &str) -> Result<(), Failure> {
    let cfg = build_config(cli)?;
    let out = out_dir(cli)?;
    let axis = train::AblationAxis::parse(axis)
        .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("unknown ablation axis {axis:?}")))?;
    let rows = train::run_ablation(&cfg, axis)?;
    train::write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    for r in &rows {
        println!("{:<12} mse {:.6} mae {:.6}", r.variant, r.test.mse, r.test.mae);
    }
    Ok(())
}
