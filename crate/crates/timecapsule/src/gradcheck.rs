//! Finite-difference gradient checker.
//!
//! Analytic gradients come from one reverse pass; numeric gradients from
//! central differences over every trainable parameter coordinate. The
//! reported figure is the max over coordinates of
//! `|analytic - numeric| / max(1, |analytic|, |numeric|)`.

use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::nn::ParamStore;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("graph error: {0}")]
    Graph(#[from] GraphError),
    #[error("non-finite value encountered at parameter {0} coordinate {1}")]
    NonFinite(String, usize),
}

pub const DEFAULT_H: f64 = 1e-5;

/// Checks the reverse-mode gradient of a scalar-valued build function
/// against central differences. `build` must construct the full forward
/// graph from the store's current parameter values and return the scalar
/// output node.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, mut build: F) -> Result<f64, GradCheckError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId, GraphError>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    g.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();

    let mut max_rel = 0.0f64;
    let n_params = store.len();
    for pid in 0..n_params {
        if !store.param(pid).trainable {
            continue;
        }
        let len = store.param(pid).data.len();
        for i in 0..len {
            let orig = store.param(pid).data[i];
            store.param_mut(pid).data[i] = orig + h;
            let mut gp = Graph::new();
            let op = build(&mut gp, store)?;
            let f_plus = gp.scalar_value(op);
            store.param_mut(pid).data[i] = orig - h;
            let mut gm = Graph::new();
            let om = build(&mut gm, store)?;
            let f_minus = gm.scalar_value(om);
            store.param_mut(pid).data[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pid][i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(GradCheckError::NonFinite(
                    store.param(pid).name.clone(),
                    i,
                ));
            }
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Linear, MultiHeadAttention, ParamStore, TransformerLayer};

    #[test]
    fn linear_map_is_exact_to_machine_epsilon_scale() {
        let mut s = ParamStore::new(1);
        let pid = s.register("p", &[6], Init::UniformFanIn(6));
        let err = grad_check(&mut s, DEFAULT_H, |g, s| {
            let p = g.param(s, pid, 6, 1);
            let scaled = g.scale(p, 3.0);
            Ok(g.sum(scaled))
        })
        .unwrap();
        assert!(err < 1e-9, "linear gradcheck err {err}");
    }

    #[test]
    fn gelu_passes_finite_difference_check() {
        let mut s = ParamStore::new(2);
        let pid = s.register("p", &[8], Init::UniformFanIn(1));
        let err = grad_check(&mut s, DEFAULT_H, |g, s| {
            let p = g.param(s, pid, 8, 1);
            let act = g.gelu(p);
            Ok(g.sum(act))
        })
        .unwrap();
        assert!(err < 1e-5, "gelu gradcheck err {err}");
    }

    #[test]
    fn softmax_attention_passes_finite_difference_check() {
        let mut s = ParamStore::new(3);
        let attn = MultiHeadAttention::register(&mut s, "attn", 8, 2);
        let x: Vec<f64> = (0..32).map(|v| ((v * 13 % 7) as f64 - 3.0) * 0.3).collect();
        let err = grad_check(&mut s, DEFAULT_H, |g, s| {
            let xn = g.constant(x.clone(), 4, 8);
            let y = attn.forward(g, s, xn)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err < 1e-5, "attention gradcheck err {err}");
    }

    #[test]
    fn transformer_layer_passes_finite_difference_check() {
        let mut s = ParamStore::new(4);
        let layer = TransformerLayer::register(&mut s, "layer", 8, 2, 16);
        let x: Vec<f64> = (0..24).map(|v| (v as f64 * 0.37).sin()).collect();
        let err = grad_check(&mut s, DEFAULT_H, |g, s| {
            let xn = g.constant(x.clone(), 3, 8);
            let y = layer.forward(g, s, xn)?;
            Ok(g.mean(y))
        })
        .unwrap();
        assert!(err < 1e-5, "transformer gradcheck err {err}");
    }

    #[test]
    fn layer_norm_and_huber_pass_finite_difference_check() {
        let mut s = ParamStore::new(5);
        let lin = Linear::register(&mut s, "lin", 4, 4);
        let gamma = s.register("gamma", &[4], Init::UniformFanIn(1));
        let beta = s.register("beta", &[4], Init::UniformFanIn(1));
        let x: Vec<f64> = (0..12).map(|v| (v as f64 * 0.71).cos()).collect();
        let target: Vec<f64> = (0..12).map(|v| (v as f64 * 0.13).sin() * 2.0).collect();
        let err = grad_check(&mut s, DEFAULT_H, |g, s| {
            let xn = g.constant(x.clone(), 3, 4);
            let y = lin.forward(g, s, xn)?;
            let ga = g.param(s, gamma, 1, 4);
            let be = g.param(s, beta, 1, 4);
            let normed = g.layer_norm(y, ga, be, 1e-5)?;
            let t = g.constant(target.clone(), 3, 4);
            g.huber(normed, t, 0.5)
        })
        .unwrap();
        assert!(err < 1e-5, "layer_norm+huber gradcheck err {err}");
    }
}
