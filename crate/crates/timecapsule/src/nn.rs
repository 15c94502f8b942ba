//! Parameter storage and transformer building blocks.
//!
//! Parameters are initialized uniformly in +-sqrt(1/fan_in), seeded from the
//! global seed combined with an FNV-1a hash of the parameter's name path, so
//! init is deterministic and independent of registration order.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphError, NodeId};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Value(f64),
    /// Uniform in +-sqrt(1/fan_in).
    UniformFanIn(usize),
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {}",
            name
        );
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Value(v) => vec![v; len],
            Init::UniformFanIn(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(fnv1a(name)));
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let pid = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: vec![0.0; len],
            trainable: true,
        });
        self.index.insert(name.to_string(), pid);
        pid
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, pid: usize) -> &Param {
        &self.params[pid]
    }

    pub fn param_mut(&mut self, pid: usize) -> &mut Param {
        &mut self.params[pid]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn accumulate_grad(&mut self, pid: usize, g: &[f64]) {
        let p = &mut self.params[pid];
        if !p.trainable {
            return;
        }
        for (a, b) in p.grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Snapshot of all parameter values, in registration order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.data.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Vec<f64>]) {
        assert_eq!(snap.len(), self.params.len());
        for (p, s) in self.params.iter_mut().zip(snap) {
            p.data.copy_from_slice(s);
        }
    }

    /// Bitwise equality of all parameter values.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(other.params.iter()).all(|(a, b)| {
                a.name == b.name
                    && a.data.len() == b.data.len()
                    && a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// y = x W + b over rows of x.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.register(
            &format!("{prefix}.weight"),
            &[in_dim, out_dim],
            Init::UniformFanIn(in_dim),
        );
        let b = store.register(
            &format!("{prefix}.bias"),
            &[out_dim],
            Init::UniformFanIn(in_dim),
        );
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, GraphError> {
        let w = g.param(store, self.w, self.in_dim, self.out_dim);
        let b = g.param(store, self.b, 1, self.out_dim);
        let y = g.matmul(x, w)?;
        g.add_row_vec(y, b)
    }
}

/// Vanilla multi-head self-attention over a token matrix [n x d].
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub d: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, heads: usize) -> Self {
        assert!(d % heads == 0, "d={} not divisible by heads={}", d, heads);
        MultiHeadAttention {
            wq: Linear::register(store, &format!("{prefix}.q"), d, d),
            wk: Linear::register(store, &format!("{prefix}.k"), d, d),
            wv: Linear::register(store, &format!("{prefix}.v"), d, d),
            wo: Linear::register(store, &format!("{prefix}.out"), d, d),
            d,
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, GraphError> {
        let (n, d) = g.dims(x);
        if d != self.d {
            return Err(GraphError::ShapeMismatch {
                op: "attention",
                detail: format!("input width {} != d {}", d, self.d),
            });
        }
        let dh = d / self.heads;
        let q = self.wq.forward(g, store, x)?;
        let k = self.wk.forward(g, store, x)?;
        let v = self.wv.forward(g, store, x)?;

        let mut merged: Option<NodeId> = None;
        for h in 0..self.heads {
            // column slice [n x dh] for this head
            let mut index = Vec::with_capacity(n * dh);
            for r in 0..n {
                for c in 0..dh {
                    index.push(r * d + h * dh + c);
                }
            }
            let index = Rc::new(index);
            let qh = g.gather(q, index.clone(), n, dh);
            let kh = g.gather(k, index.clone(), n, dh);
            let vh = g.gather(v, index.clone(), n, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_rows(scaled);
            let oh = g.matmul(attn, vh)?;
            // place the head back into its column block of [n x d]
            let placed = g.scatter(oh, index, n, d);
            merged = Some(match merged {
                None => placed,
                Some(acc) => g.add(acc, placed)?,
            });
        }
        self.wo.forward(g, store, merged.unwrap())
    }
}

/// Pre-norm transformer encoder layer: x + MSA(LN(x)), then + FFN(LN(.)).
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1_gamma: usize,
    pub ln1_beta: usize,
    pub attn: MultiHeadAttention,
    pub ln2_gamma: usize,
    pub ln2_beta: usize,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub d: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl TransformerLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        let ln1_gamma = store.register(&format!("{prefix}.ln1.gamma"), &[d], Init::Value(1.0));
        let ln1_beta = store.register(&format!("{prefix}.ln1.beta"), &[d], Init::Value(0.0));
        let attn = MultiHeadAttention::register(store, &format!("{prefix}.attn"), d, heads);
        let ln2_gamma = store.register(&format!("{prefix}.ln2.gamma"), &[d], Init::Value(1.0));
        let ln2_beta = store.register(&format!("{prefix}.ln2.beta"), &[d], Init::Value(0.0));
        let ffn1 = Linear::register(store, &format!("{prefix}.ffn1"), d, d_ff);
        let ffn2 = Linear::register(store, &format!("{prefix}.ffn2"), d_ff, d);
        TransformerLayer {
            ln1_gamma,
            ln1_beta,
            attn,
            ln2_gamma,
            ln2_beta,
            ffn1,
            ffn2,
            d,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, GraphError> {
        let g1 = g.param(store, self.ln1_gamma, 1, self.d);
        let b1 = g.param(store, self.ln1_beta, 1, self.d);
        let normed = g.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
        let attn_out = self.attn.forward(g, store, normed)?;
        let h = g.add(x, attn_out)?;

        let g2 = g.param(store, self.ln2_gamma, 1, self.d);
        let b2 = g.param(store, self.ln2_beta, 1, self.d);
        let normed2 = g.layer_norm(h, g2, b2, LAYER_NORM_EPS)?;
        let f1 = self.ffn1.forward(g, store, normed2)?;
        let act = g.gelu(f1);
        let f2 = self.ffn2.forward(g, store, act)?;
        g.add(h, f2)
    }
}

/// Fixed sinusoidal positional encoding table, [n x d] row-major.
pub fn sinusoidal_pe(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let exponent = 2.0 * ((i / 2) as f64) / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
