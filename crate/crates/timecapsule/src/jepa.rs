//! JEPA internal-prediction support: target-sequence preprocessing, the
//! EMA-updated target encoder, and the stop-gradient representation loss.
//!
//! The target encoder shares the online encoder's parameter names and
//! shapes but is never touched by the optimizer; `ema_update` is its only
//! mutation point.

use thiserror::Error;

use crate::nn::ParamStore;

#[derive(Debug, Error)]
pub enum JepaError {
    #[error("non-positive length: {0}")]
    NonPositiveLength(&'static str),
    #[error("parameter set mismatch between online and target encoders")]
    ParamMismatch,
}

/// Which representation the JEPA loss compares against the target encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum JepaCompare {
    /// Predictor output Y0 (default reading).
    Predictor,
    /// Encoder output X3 (the literal reading of the loss expression).
    Encoder,
}

/// Distance used for the representation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum JepaDistance {
    Huber,
    L2,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct JepaConfig {
    pub enabled: bool,
    /// Loss weight lambda >= 0; 0 keeps logging without training effect.
    pub lambda: f64,
    /// EMA momentum for the target encoder.
    pub tau: f64,
    /// Chunk-EMA smoothing for horizon targets longer than the lookback.
    pub beta: f64,
    pub compare: JepaCompare,
    pub distance: JepaDistance,
}

impl Default for JepaConfig {
    fn default() -> Self {
        JepaConfig {
            enabled: false,
            lambda: 1.0,
            tau: 0.999,
            beta: 0.9,
            compare: JepaCompare::Predictor,
            distance: JepaDistance::Huber,
        }
    }
}

/// Reshapes a [v x t_y] horizon window to the lookback length t_x:
/// identity when t_y == t_x, zero-padded when shorter, and chunked with
/// sequential exponential smoothing S_k = beta*S_{k-1} + (1-beta)*chunk_k
/// when longer (final partial chunk zero-padded).
pub fn preprocess_target(
    y: &[f64],
    v: usize,
    t_y: usize,
    t_x: usize,
    beta: f64,
) -> Result<Vec<f64>, JepaError> {
    if t_y == 0 {
        return Err(JepaError::NonPositiveLength("t_y"));
    }
    if t_x == 0 {
        return Err(JepaError::NonPositiveLength("t_x"));
    }
    debug_assert_eq!(y.len(), v * t_y);
    if t_y == t_x {
        return Ok(y.to_vec());
    }
    if t_y < t_x {
        let mut out = vec![0.0; v * t_x];
        for i in 0..v {
            out[i * t_x..i * t_x + t_y].copy_from_slice(&y[i * t_y..(i + 1) * t_y]);
        }
        return Ok(out);
    }
    // t_y > t_x: chunk and smooth
    let chunks = t_y.div_ceil(t_x);
    let mut smoothed = vec![0.0; v * t_x];
    for k in 0..chunks {
        let mut chunk = vec![0.0; v * t_x];
        for i in 0..v {
            for j in 0..t_x {
                let src = k * t_x + j;
                if src < t_y {
                    chunk[i * t_x + j] = y[i * t_y + src];
                }
            }
        }
        if k == 0 {
            smoothed = chunk;
        } else {
            for (s, c) in smoothed.iter_mut().zip(&chunk) {
                *s = beta * *s + (1.0 - beta) * c;
            }
        }
    }
    Ok(smoothed)
}

/// theta_target <- tau*theta_target + (1-tau)*theta_online, applied to the
/// encoder parameters (names starting with `revin.` or `encoder.`).
pub fn ema_update(
    target: &mut ParamStore,
    online: &ParamStore,
    tau: f64,
) -> Result<(), JepaError> {
    if target.len() != online.len() {
        return Err(JepaError::ParamMismatch);
    }
    for (t, o) in target.iter_mut().zip(online.iter()) {
        if t.name != o.name || t.data.len() != o.data.len() {
            return Err(JepaError::ParamMismatch);
        }
        if !is_encoder_param(&t.name) {
            continue;
        }
        for (tv, ov) in t.data.iter_mut().zip(&o.data) {
            *tv = tau * *tv + (1.0 - tau) * ov;
        }
    }
    Ok(())
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("revin.") || name.starts_with("encoder.")
}
