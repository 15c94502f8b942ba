//! Reversible instance normalization.
//!
//! Statistics are computed per instance and per variate along the temporal
//! axis of the lookback window only; the horizon is denormalized with the
//! same (causally available) statistics. The learnable affine (gamma, beta
//! per variate) is enabled by default with gamma = 1, beta = 0.

use thiserror::Error;

pub const REVIN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum RevinError {
    #[error("temporal length must be >= 2, got {0}")]
    WindowTooShort(usize),
    #[error("non-finite input value")]
    NonFinite,
    #[error("variate count mismatch: stats have {0}, input has {1}")]
    VariateMismatch(usize, usize),
}

/// Per-variate mean and standard deviation of one lookback window.
#[derive(Debug, Clone)]
pub struct RevinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

impl RevinStats {
    /// Computes stats from a [v x t] row-major lookback window.
    pub fn compute(x: &[f64], v: usize, t: usize) -> Result<Self, RevinError> {
        if t < 2 {
            return Err(RevinError::WindowTooShort(t));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(RevinError::NonFinite);
        }
        let mut mean = vec![0.0; v];
        let mut std = vec![0.0; v];
        for i in 0..v {
            let row = &x[i * t..(i + 1) * t];
            let m = row.iter().sum::<f64>() / t as f64;
            let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t as f64;
            mean[i] = m;
            std[i] = (var + REVIN_EPS).sqrt();
        }
        Ok(RevinStats {
            mean,
            std,
            eps: REVIN_EPS,
        })
    }
}

/// Normalizes a [v x t] window: gamma*(x - mean)/std + beta per variate.
/// Returns the normalized values and the captured stats.
pub fn normalize(
    x: &[f64],
    v: usize,
    t: usize,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Vec<f64>, RevinStats), RevinError> {
    let stats = RevinStats::compute(x, v, t)?;
    let mut out = vec![0.0; v * t];
    for i in 0..v {
        for j in 0..t {
            out[i * t + j] = gamma[i] * (x[i * t + j] - stats.mean[i]) / stats.std[i] + beta[i];
        }
    }
    Ok((out, stats))
}

/// Exact algebraic inverse of `normalize`, applied to a horizon-length
/// [v x t_y] output using the lookback stats.
pub fn denormalize(
    y_norm: &[f64],
    v: usize,
    t_y: usize,
    stats: &RevinStats,
    gamma: &[f64],
    beta: &[f64],
) -> Result<Vec<f64>, RevinError> {
    if stats.mean.len() != v {
        return Err(RevinError::VariateMismatch(stats.mean.len(), v));
    }
    let mut out = vec![0.0; v * t_y];
    for i in 0..v {
        for j in 0..t_y {
            out[i * t_y + j] =
                (y_norm[i * t_y + j] - beta[i]) / gamma[i] * stats.std[i] + stats.mean[i];
        }
    }
    Ok(out)
}
