//! AdamW optimizer with decoupled weight decay and bias correction.

use thiserror::Error;

use crate::nn::ParamStore;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    NonPositiveLr(f64),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Result<Self, OptimError> {
        if config.lr <= 0.0 {
            return Err(OptimError::NonPositiveLr(config.lr));
        }
        Ok(AdamWState {
            config,
            m: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            step: 0,
        })
    }

    /// One AdamW update from the gradients currently held in the store.
    /// Decay is decoupled: p *= (1 - lr*wd) before the Adam step.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), OptimError> {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (pid, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            for i in 0..p.data.len() {
                let g = p.grad[i];
                if !g.is_finite() {
                    return Err(OptimError::NonFiniteGrad(p.name.clone()));
                }
                p.data[i] *= 1.0 - c.lr * c.weight_decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamStore};

    fn one_param_store(value: f64) -> (ParamStore, usize) {
        let mut s = ParamStore::new(0);
        let pid = s.register("p", &[1], Init::Value(value));
        (s, pid)
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let (mut s, pid) = one_param_store(3.5);
        let mut opt = AdamWState::new(
            &s,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.param(pid).data[0], 3.5);
    }

    #[test]
    fn zero_grad_with_decay_shrinks_multiplicatively() {
        let (mut s, pid) = one_param_store(2.0);
        let lr = 0.01;
        let wd = 0.1;
        let mut opt = AdamWState::new(
            &s,
            AdamWConfig {
                lr,
                weight_decay: wd,
                ..Default::default()
            },
        )
        .unwrap();
        opt.step(&mut s).unwrap();
        assert!((s.param(pid).data[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn one_step_on_half_p_squared_matches_hand_recurrence() {
        // f(p) = p^2/2 at p = 1 gives gradient 1.
        let (mut s, pid) = one_param_store(1.0);
        let c = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = AdamWState::new(&s, c.clone()).unwrap();
        s.param_mut(pid).grad[0] = 1.0;
        opt.step(&mut s).unwrap();

        // hand-stepped recurrences
        let m = (1.0 - c.beta1) * 1.0;
        let v = (1.0 - c.beta2) * 1.0;
        let m_hat: f64 = m / (1.0 - c.beta1);
        let v_hat: f64 = v / (1.0 - c.beta2);
        let expect = 1.0 - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        assert!((s.param(pid).data[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let (s, _) = one_param_store(0.0);
        assert!(AdamWState::new(
            &s,
            AdamWConfig {
                lr: 0.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let (mut s, pid) = one_param_store(1.0);
        let mut opt = AdamWState::new(&s, AdamWConfig::default()).unwrap();
        s.param_mut(pid).grad[0] = f64::NAN;
        assert!(opt.step(&mut s).is_err());
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let run = || {
            let (mut s, pid) = one_param_store(1.0);
            let mut opt = AdamWState::new(&s, AdamWConfig::default()).unwrap();
            for k in 0..10 {
                s.zero_grad();
                s.param_mut(pid).grad[0] = (k as f64 * 0.3).sin();
                opt.step(&mut s).unwrap();
            }
            s.param(pid).data[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
