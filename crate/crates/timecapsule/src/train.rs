//! Training loop, evaluation metrics, naive baselines, and ablation
//! orchestration.
//!
//! Seeding hierarchy: one global seed derives the parameter-init seed
//! (used directly by the store), a per-epoch shuffle seed, and the noise
//! stream, so any two runs with equal (config, seed, data) are bitwise
//! identical. Metrics are computed in standardized space over all
//! (window, step, variate) triples.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, SeriesFrame};
use crate::graph::Graph;
use crate::jepa;
use crate::model::{CapsuleModel, JepaContext, ModelConfig, ModelError};
use crate::nn::ParamStore;
use crate::optim::{AdamWConfig, AdamWState, OptimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("graph error: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("optimizer error: {0}")]
    Optim(#[from] OptimError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: training diverged")]
    Diverged { epoch: usize, batch: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data_path: PathBuf,
    pub ratios: (usize, usize, usize),
    pub model: ModelConfig,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early-stopping patience in epochs on validation MSE.
    pub patience: usize,
    pub seed: u64,
    /// Report metrics in the raw data scale instead of standardized space.
    pub raw_metrics: bool,
}

impl TrainConfig {
    pub fn new(data_path: PathBuf, model: ModelConfig) -> Self {
        TrainConfig {
            data_path,
            ratios: (6, 2, 2),
            model,
            optim: AdamWConfig::default(),
            batch_size: 32,
            epochs: 30,
            patience: 3,
            seed: 2021,
            raw_metrics: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        self.model
            .validate()
            .map_err(TrainError::Model)
    }
}

/// Derived seed hierarchy; every stochastic consumer gets its own stream.
pub struct Seeds {
    pub init: u64,
    pub shuffle_base: u64,
    pub noise: u64,
}

pub fn derive_seeds(seed: u64) -> Seeds {
    // distinct odd offsets keep the streams apart for any base seed
    Seeds {
        init: seed,
        shuffle_base: seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1),
        noise: seed.wrapping_mul(0xbf58476d1ce4e5b9).wrapping_add(3),
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// (mse, mae) per forecast step, averaged over windows and variates.
    pub per_horizon: Vec<(f64, f64)>,
    pub windows: usize,
}

/// Accumulates squared and absolute errors over prediction triples.
#[derive(Debug, Clone)]
pub struct MetricsAccum {
    sq: f64,
    abs: f64,
    count: usize,
    horizon_sq: Vec<f64>,
    horizon_abs: Vec<f64>,
    horizon_count: Vec<usize>,
    windows: usize,
}

impl MetricsAccum {
    pub fn new(t_y: usize) -> Self {
        MetricsAccum {
            sq: 0.0,
            abs: 0.0,
            count: 0,
            horizon_sq: vec![0.0; t_y],
            horizon_abs: vec![0.0; t_y],
            horizon_count: vec![0; t_y],
            windows: 0,
        }
    }

    /// Adds one window's [v x t_y] prediction and truth.
    pub fn add(&mut self, pred: &[f64], truth: &[f64], v: usize, t_y: usize) {
        debug_assert_eq!(pred.len(), v * t_y);
        for i in 0..v {
            for j in 0..t_y {
                let e = pred[i * t_y + j] - truth[i * t_y + j];
                self.sq += e * e;
                self.abs += e.abs();
                self.count += 1;
                self.horizon_sq[j] += e * e;
                self.horizon_abs[j] += e.abs();
                self.horizon_count[j] += 1;
            }
        }
        self.windows += 1;
    }

    pub fn finish(self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mse: self.sq / n,
            mae: self.abs / n,
            per_horizon: self
                .horizon_sq
                .iter()
                .zip(&self.horizon_abs)
                .zip(&self.horizon_count)
                .map(|((s, a), c)| {
                    let c = (*c).max(1) as f64;
                    (s / c, a / c)
                })
                .collect(),
            windows: self.windows,
        }
    }
}

/// Noise-free forward passes over every window of `frame`.
pub fn evaluate(
    model: &CapsuleModel,
    store: &ParamStore,
    frame: &SeriesFrame,
) -> Result<Metrics, TrainError> {
    let c = &model.config;
    let starts = data::window_starts(frame.rows, c.t_x, c.t_y, 1)?;
    let mut accum = MetricsAccum::new(c.t_y);
    // eval never samples; the rng is inert
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in starts {
        let (x, y) = data::extract_window(frame, s, c.t_x, c.t_y);
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &x, false, &mut rng, None)?;
        accum.add(g.data(out.y_hat), &y, c.v, c.t_y);
    }
    Ok(accum.finish())
}

/// Naive baseline forecasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Repeats the last observed value of each variate.
    RepeatLast,
    /// Repeats the last full period of the given length.
    SeasonalNaive { period: usize },
}

pub fn baseline_metrics(
    frame: &SeriesFrame,
    t_x: usize,
    t_y: usize,
    baseline: Baseline,
) -> Result<Metrics, TrainError> {
    let v = frame.cols;
    let starts = data::window_starts(frame.rows, t_x, t_y, 1)?;
    let mut accum = MetricsAccum::new(t_y);
    for s in starts {
        let (x, y) = data::extract_window(frame, s, t_x, t_y);
        let mut pred = vec![0.0; v * t_y];
        for i in 0..v {
            for j in 0..t_y {
                pred[i * t_y + j] = match baseline {
                    Baseline::RepeatLast => x[i * t_x + t_x - 1],
                    Baseline::SeasonalNaive { period } => {
                        let p = period.clamp(1, t_x);
                        x[i * t_x + t_x - p + j % p]
                    }
                };
            }
        }
        accum.add(&pred, &y, v, t_y);
    }
    Ok(accum.finish())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    /// Mean representation loss over the epoch when JEPA is enabled.
    pub jepa_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub model: CapsuleModel,
    pub store: ParamStore,
    pub logs: Vec<EpochLog>,
    pub best_val_mse: f64,
    pub best_epoch: usize,
}

/// Writes the per-epoch log CSV.
pub fn write_logs(path: &std::path::Path, logs: &[EpochLog]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_mse,val_mae,jepa_loss")?;
    for l in logs {
        let jl = l
            .jepa_loss
            .map(|v| format!("{v:.17e}"))
            .unwrap_or_default();
        writeln!(
            f,
            "{},{:.17e},{:.17e},{:.17e},{}",
            l.epoch, l.train_loss, l.val_mse, l.val_mae, jl
        )?;
    }
    Ok(())
}

/// Seeded mini-batch AdamW on standardized train/val frames. Selects the
/// checkpoint with the best validation MSE and restores it before
/// returning.
pub fn train_on_frames(
    config: &TrainConfig,
    train: &SeriesFrame,
    val: &SeriesFrame,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let seeds = derive_seeds(config.seed);
    let mut store = ParamStore::new(seeds.init);
    let model = CapsuleModel::new(config.model.clone(), &mut store)?;
    let mut optim = AdamWState::new(&store, config.optim.clone())?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds.noise);

    let jepa_on = config.model.jepa.enabled;
    let lambda = config.model.jepa.lambda;
    // the target encoder starts as a copy of the online parameters
    let mut target_store = jepa_on.then(|| store.clone());

    let c = &config.model;
    let starts = data::window_starts(train.rows, c.t_x, c.t_y, 1)?;

    let mut logs = Vec::new();
    let mut best_val_mse = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_snapshot = store.snapshot();
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let mut order = starts.clone();
        data::shuffle_windows(&mut order, seeds.shuffle_base.wrapping_add(epoch as u64));

        let mut epoch_loss = 0.0;
        let mut epoch_jepa = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let mut g = Graph::new();
            let factors = model.factors(&mut g, &store)?;
            let mut forecast_sum = None;
            let mut jepa_sum = None;
            for &s in batch {
                let (x, y) = data::extract_window(train, s, c.t_x, c.t_y);
                let ctx_store;
                let ctx = match &target_store {
                    Some(ts) => {
                        ctx_store = JepaContext {
                            target_store: ts,
                            y_raw: &y,
                        };
                        Some(&ctx_store)
                    }
                    None => None,
                };
                let out = model.forward_with_factors(
                    &mut g,
                    &store,
                    &x,
                    true,
                    &mut noise_rng,
                    ctx,
                    factors,
                )?;
                let truth = g.constant(y.clone(), c.v, c.t_y);
                let loss = g.huber(out.y_hat, truth, c.huber_delta)?;
                forecast_sum = Some(match forecast_sum {
                    None => loss,
                    Some(acc) => g.add(acc, loss)?,
                });
                if let Some(jl) = out.jepa_loss {
                    jepa_sum = Some(match jepa_sum {
                        None => jl,
                        Some(acc) => g.add(acc, jl)?,
                    });
                }
            }
            let inv_b = 1.0 / batch.len() as f64;
            let forecast_mean = g.scale(forecast_sum.unwrap(), inv_b);
            // lambda = 0 keeps the representation loss out of the graph's
            // backward reach entirely, so such runs match JEPA-disabled
            // runs bitwise while still logging the curve
            let total = match jepa_sum {
                Some(js) if lambda > 0.0 => {
                    let jepa_mean = g.scale(js, inv_b * lambda);
                    g.add(forecast_mean, jepa_mean)?
                }
                _ => forecast_mean,
            };
            let loss_val = g.scalar_value(total);
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: bi });
            }
            epoch_loss += g.scalar_value(forecast_mean);
            if let Some(js) = jepa_sum {
                epoch_jepa += g.scalar_value(js) * inv_b;
            }
            batches += 1;

            store.zero_grad();
            g.backward(total, &mut store)
                .map_err(ModelError::Graph)?;
            optim.step(&mut store)?;
            if let Some(ts) = &mut target_store {
                jepa::ema_update(ts, &store, config.model.jepa.tau)
                    .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            }
        }

        let val_metrics = evaluate(&model, &store, val)?;
        logs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_mse: val_metrics.mse,
            val_mae: val_metrics.mae,
            jepa_loss: jepa_on.then_some(epoch_jepa / batches.max(1) as f64),
        });

        if val_metrics.mse < best_val_mse {
            best_val_mse = val_metrics.mse;
            best_epoch = epoch;
            best_snapshot = store.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }

    store.restore(&best_snapshot);
    Ok(TrainOutcome {
        model,
        store,
        logs,
        best_val_mse,
        best_epoch,
    })
}

/// Loaded and standardized splits of a dataset.
pub struct PreparedData {
    pub train: SeriesFrame,
    pub val: SeriesFrame,
    pub test: SeriesFrame,
    pub scaler: data::Scaler,
}

pub fn prepare(config: &TrainConfig) -> Result<PreparedData, TrainError> {
    let frame = data::load_csv(&config.data_path)?;
    let c = &config.model;
    if frame.cols != c.v {
        return Err(TrainError::InvalidConfig(format!(
            "model expects {} variates, dataset has {}",
            c.v, frame.cols
        )));
    }
    let (tr, va, te) = data::split(&frame, config.ratios, c.t_x, c.t_y)?;
    let (tr, va, te, scaler) = data::standardize(&tr, &va, &te)?;
    Ok(PreparedData {
        train: tr,
        val: va,
        test: te,
        scaler,
    })
}

/// End-to-end: load, split, standardize, train, and return the outcome
/// together with the prepared data for downstream evaluation.
pub fn train(config: &TrainConfig) -> Result<(TrainOutcome, PreparedData), TrainError> {
    let prepared = prepare(config)?;
    let outcome = train_on_frames(config, &prepared.train, &prepared.val)?;
    Ok((outcome, prepared))
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    ResidualInfo,
    Noise,
    PositionalEncoding,
    CompressionDims,
    Jepa,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "residual_info" => Some(Self::ResidualInfo),
            "noise" => Some(Self::Noise),
            "positional_encoding" => Some(Self::PositionalEncoding),
            "compression_dims" => Some(Self::CompressionDims),
            "jepa" => Some(Self::Jepa),
            _ => None,
        }
    }
}

pub struct AblationRow {
    pub variant: String,
    pub test: Metrics,
}

/// Named config variants along one ablation axis.
pub fn ablation_variants(base: &TrainConfig, axis: AblationAxis) -> Vec<(String, TrainConfig)> {
    use crate::model::ResidualMode;
    let mut out = Vec::new();
    let mut push = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        out.push((name.to_string(), cfg));
    };
    match axis {
        AblationAxis::ResidualInfo => {
            push("residual", &|c| c.model.residual_mode = ResidualMode::Residual);
            push("original", &|c| c.model.residual_mode = ResidualMode::Original);
            push("off", &|c| c.model.residual_mode = ResidualMode::Off);
        }
        AblationAxis::Noise => {
            push("noise_on", &|c| c.model.use_noise = true);
            push("noise_off", &|c| c.model.use_noise = false);
        }
        AblationAxis::PositionalEncoding => {
            push("pe_on", &|c| c.model.use_pe = true);
            push("pe_off", &|c| c.model.use_pe = false);
        }
        AblationAxis::CompressionDims => {
            push("4_8_4", &|c| {
                c.model.t_c = 4;
                c.model.l = 8;
                c.model.v_c = 4.min(c.model.v);
            });
            push("1_1_1", &|c| {
                c.model.t_c = 1;
                c.model.l = 1;
                c.model.v_c = 1;
            });
        }
        AblationAxis::Jepa => {
            push("jepa_on", &|c| {
                c.model.jepa.enabled = true;
                c.model.jepa.lambda = 1.0;
            });
            push("jepa_off", &|c| c.model.jepa.enabled = false);
        }
    }
    out
}

/// Trains every variant along an axis and reports test metrics.
pub fn run_ablation(
    base: &TrainConfig,
    axis: AblationAxis,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base, axis) {
        let (outcome, prepared) = train(&cfg)?;
        let test = evaluate(&outcome.model, &outcome.store, &prepared.test)?;
        rows.push(AblationRow {
            variant: name,
            test,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(
    path: &std::path::Path,
    rows: &[AblationRow],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "variant,test_mse,test_mae")?;
    for r in rows {
        writeln!(f, "{},{:.6},{:.6}", r.variant, r.test.mse, r.test.mae)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Sinusoid-mixture frame for end-to-end tests: each variate is a sum of
/// two sinusoids with per-variate periods and phases (signal variance
/// close to 1) plus Gaussian noise of the given standard deviation.
pub fn synthetic_sinusoid_frame(
    rows: usize,
    v: usize,
    noise_std: f64,
    seed: u64,
) -> SeriesFrame {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // var(a*sin1 + a*sin2) = a^2/2 + a^2/2 = a^2; target signal variance 0.99
    let amp = 0.99f64.sqrt();
    let mut values = vec![0.0; rows * v];
    for i in 0..v {
        let p1 = 16.0 + 4.0 * i as f64;
        let p2 = 37.0 + 3.0 * i as f64;
        let phase1 = 0.7 * i as f64;
        let phase2 = 1.3 * i as f64 + 0.4;
        for r in 0..rows {
            let t = r as f64;
            let signal = amp
                * ((2.0 * std::f64::consts::PI * t / p1 + phase1).sin()
                    + (2.0 * std::f64::consts::PI * t / p2 + phase2).sin());
            let noise: f64 = rng.sample(StandardNormal);
            values[r * v + i] = signal + noise_std * noise;
        }
    }
    SeriesFrame {
        names: (0..v).map(|i| format!("v{i}")).collect(),
        timestamps: None,
        values,
        rows,
        cols: v,
    }
}
