//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! A `Graph` records operations as they are executed; node ids are indices
//! into the tape, so creation order is already a topological order and the
//! reverse pass is a single backward sweep. Values are dense row-major
//! matrices of `f64` (scalars are 1x1, vectors are nx1 or 1xn). Leaves may
//! be bound to a parameter in a [`crate::nn::ParamStore`], in which case
//! `backward` accumulates their gradients into the store.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::nn::ParamStore;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got {0}x{1}")]
    NonScalarOutput(usize, usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// C = A * B for row-major slices (no accumulation).
pub fn dgemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let a = ArrayView2::from_shape((m, k), a).unwrap();
    let b = ArrayView2::from_shape((k, n), b).unwrap();
    let mut c = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(1.0, &a, &b, 0.0, &mut c);
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// X[m x n] + b[1 x n], broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// X[m x n] + s[m x 1], broadcast over columns.
    AddColVec(NodeId, NodeId),
    /// Row i of X scaled by s[i].
    MulColVec(NodeId, NodeId),
    /// Row i of X divided by s[i].
    DivColVec(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    SoftmaxRows(NodeId),
    /// out[i] = x[index[i]]; backward scatter-adds.
    Gather {
        x: NodeId,
        index: Rc<Vec<usize>>,
    },
    /// out[index[i]] = x[i] into a zero output buffer.
    Scatter {
        x: NodeId,
        index: Rc<Vec<usize>>,
    },
    /// Forwards values, blocks gradient flow.
    StopGrad,
    Sum(NodeId),
    Huber {
        pred: NodeId,
        target: NodeId,
        delta: f64,
    },
}

struct Node {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    param: Option<usize>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].data[0]
    }

    fn push(&mut self, data: Vec<f64>, rows: usize, cols: usize, op: Op) -> NodeId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            data,
            rows,
            cols,
            op,
            param: None,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> NodeId {
        self.push(data, rows, cols, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![v], 1, 1)
    }

    /// Leaf bound to a parameter; `rows x cols` must match the flattened
    /// parameter length. Gradients accumulate into the store on backward.
    pub fn param(&mut self, store: &ParamStore, pid: usize, rows: usize, cols: usize) -> NodeId {
        let p = store.param(pid);
        assert_eq!(p.data.len(), rows * cols, "param {} dims", p.name);
        let id = self.push(p.data.clone(), rows, cols, Op::Leaf);
        self.nodes[id].param = Some(pid);
        id
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(usize, usize), GraphError> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb || ca != cb {
            return Err(GraphError::ShapeMismatch {
                op,
                detail: format!("{}x{} vs {}x{}", ra, ca, rb, cb),
            });
        }
        Ok((ra, ca))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(data, r, c, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(data, r, c, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(data, r, c, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let (r, c) = self.dims(a);
        let data = self.nodes[a].data.iter().map(|x| x * s).collect();
        self.push(data, r, c, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} by {}x{}", m, k, k2, n),
            });
        }
        let mut data = vec![0.0; m * n];
        dgemm(m, k, n, &self.nodes[a].data, &self.nodes[b].data, &mut data);
        Ok(self.push(data, m, n, Op::MatMul(a, b)))
    }

    pub fn add_row_vec(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.dims(x);
        let (rb, cb) = self.dims(b);
        if rb * cb != n {
            return Err(GraphError::ShapeMismatch {
                op: "add_row_vec",
                detail: format!("{}x{} + vec of {}", m, n, rb * cb),
            });
        }
        let mut data = self.nodes[x].data.clone();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += self.nodes[b].data[c];
            }
        }
        Ok(self.push(data, m, n, Op::AddRowVec(x, b)))
    }

    pub fn add_col_vec(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.dims(x);
        let (rs, cs) = self.dims(s);
        if rs * cs != m {
            return Err(GraphError::ShapeMismatch {
                op: "add_col_vec",
                detail: format!("{}x{} + vec of {}", m, n, rs * cs),
            });
        }
        let mut data = self.nodes[x].data.clone();
        for r in 0..m {
            let v = self.nodes[s].data[r];
            for c in 0..n {
                data[r * n + c] += v;
            }
        }
        Ok(self.push(data, m, n, Op::AddColVec(x, s)))
    }

    pub fn mul_col_vec(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.dims(x);
        let (rs, cs) = self.dims(s);
        if rs * cs != m {
            return Err(GraphError::ShapeMismatch {
                op: "mul_col_vec",
                detail: format!("{}x{} * vec of {}", m, n, rs * cs),
            });
        }
        let mut data = self.nodes[x].data.clone();
        for r in 0..m {
            let v = self.nodes[s].data[r];
            for c in 0..n {
                data[r * n + c] *= v;
            }
        }
        Ok(self.push(data, m, n, Op::MulColVec(x, s)))
    }

    pub fn div_col_vec(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.dims(x);
        let (rs, cs) = self.dims(s);
        if rs * cs != m {
            return Err(GraphError::ShapeMismatch {
                op: "div_col_vec",
                detail: format!("{}x{} / vec of {}", m, n, rs * cs),
            });
        }
        let mut data = self.nodes[x].data.clone();
        for r in 0..m {
            let v = self.nodes[s].data[r];
            for c in 0..n {
                data[r * n + c] /= v;
            }
        }
        Ok(self.push(data, m, n, Op::DivColVec(x, s)))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.dims(x);
        let data = self.nodes[x].data.iter().map(|&v| gelu_scalar(v)).collect();
        self.push(data, m, n, Op::Gelu(x))
    }

    /// Per-row layer normalization over the column axis, with affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, GraphError> {
        let (m, n) = self.dims(x);
        let (rg, cg) = self.dims(gamma);
        let (rb, cb) = self.dims(beta);
        if rg * cg != n || rb * cb != n {
            return Err(GraphError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("{}x{} with affine {} / {}", m, n, rg * cg, rb * cb),
            });
        }
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &self.nodes[x].data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                data[r * n + c] = self.nodes[gamma].data[c] * xh + self.nodes[beta].data[c];
            }
        }
        Ok(self.push(data, m, n, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.dims(x);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &self.nodes[x].data[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..n {
                let e = (row[c] - max).exp();
                data[r * n + c] = e;
                sum += e;
            }
            for c in 0..n {
                data[r * n + c] /= sum;
            }
        }
        self.push(data, m, n, Op::SoftmaxRows(x))
    }

    /// out[i] = x[index[i]], viewed with the given output dims.
    pub fn gather(
        &mut self,
        x: NodeId,
        index: Rc<Vec<usize>>,
        rows: usize,
        cols: usize,
    ) -> NodeId {
        debug_assert_eq!(index.len(), rows * cols);
        let src = &self.nodes[x].data;
        let data = index.iter().map(|&i| src[i]).collect();
        self.push(data, rows, cols, Op::Gather { x, index })
    }

    /// Scatters x into a zero buffer: out[index[i]] = x[i].
    pub fn scatter(
        &mut self,
        x: NodeId,
        index: Rc<Vec<usize>>,
        rows: usize,
        cols: usize,
    ) -> NodeId {
        debug_assert_eq!(index.len(), self.nodes[x].data.len());
        let mut data = vec![0.0; rows * cols];
        for (i, &dst) in index.iter().enumerate() {
            data[dst] = self.nodes[x].data[i];
        }
        self.push(
            data,
            rows,
            cols,
            Op::Scatter { x, index },
        )
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.dims(x);
        let mut index = Vec::with_capacity(m * n);
        for c in 0..n {
            for r in 0..m {
                index.push(r * n + c);
            }
        }
        self.gather(x, Rc::new(index), n, m)
    }

    /// Blocks gradient flow; forward is the identity.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.dims(x);
        let data = self.nodes[x].data.clone();
        self.push(data, m, n, Op::StopGrad)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].data.iter().sum();
        self.push(vec![s], 1, 1, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].data.len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean Huber loss between pred and target. delta must be positive.
    pub fn huber(&mut self, pred: NodeId, target: NodeId, delta: f64) -> Result<NodeId, GraphError> {
        assert!(delta > 0.0, "huber delta must be positive");
        self.same_shape("huber", pred, target)?;
        let n = self.nodes[pred].data.len();
        let mut acc = 0.0;
        for i in 0..n {
            let r = self.nodes[pred].data[i] - self.nodes[target].data[i];
            acc += if r.abs() <= delta {
                0.5 * r * r
            } else {
                delta * (r.abs() - 0.5 * delta)
            };
        }
        Ok(self.push(
            vec![acc / n as f64],
            1,
            1,
            Op::Huber { pred, target, delta },
        ))
    }

    /// Reverse pass from a scalar output. Gradients of parameter-bound
    /// leaves accumulate into `store`; everything else is discarded.
    pub fn backward(&self, out: NodeId, store: &mut ParamStore) -> Result<(), GraphError> {
        let (r, c) = self.dims(out);
        if r != 1 || c != 1 {
            return Err(GraphError::NonScalarOutput(r, c));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out] = Some(vec![1.0]);

        for id in (0..=out).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if let Some(pid) = node.param {
                store.accumulate_grad(pid, &g);
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_into(&mut grads, *a, &g, self);
                    add_into(&mut grads, *b, &g, self);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, *a, &g, self);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads, *b, &neg, self);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*b].data)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    add_into(&mut grads, *a, &ga, self);
                    add_into(&mut grads, *b, &gb, self);
                }
                Op::Scale(a, s) => {
                    let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
                    add_into(&mut grads, *a, &scaled, self);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let (_, n) = self.dims(*b);
                    let gv = ArrayView2::from_shape((m, n), g.as_slice()).unwrap();
                    // gA += g * B^T
                    let bv = ArrayView2::from_shape((k, n), self.nodes[*b].data.as_slice())
                        .unwrap()
                        .reversed_axes();
                    let ga = grads[*a].get_or_insert_with(|| vec![0.0; m * k]);
                    let mut gav = ArrayViewMut2::from_shape((m, k), ga.as_mut_slice()).unwrap();
                    general_mat_mul(1.0, &gv, &bv, 1.0, &mut gav);
                    // gB += A^T * g
                    let av = ArrayView2::from_shape((m, k), self.nodes[*a].data.as_slice())
                        .unwrap()
                        .reversed_axes();
                    let gb = grads[*b].get_or_insert_with(|| vec![0.0; k * n]);
                    let mut gbv = ArrayViewMut2::from_shape((k, n), gb.as_mut_slice()).unwrap();
                    general_mat_mul(1.0, &av, &gv, 1.0, &mut gbv);
                }
                Op::AddRowVec(x, b) => {
                    add_into(&mut grads, *x, &g, self);
                    let (m, n) = self.dims(*x);
                    let gb = grads[*b].get_or_insert_with(|| vec![0.0; n]);
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                }
                Op::AddColVec(x, s) => {
                    add_into(&mut grads, *x, &g, self);
                    let (m, n) = self.dims(*x);
                    let gs = grads[*s].get_or_insert_with(|| vec![0.0; m]);
                    for r in 0..m {
                        for c in 0..n {
                            gs[r] += g[r * n + c];
                        }
                    }
                }
                Op::MulColVec(x, s) => {
                    let (m, n) = self.dims(*x);
                    let sdata = &self.nodes[*s].data;
                    let xdata = &self.nodes[*x].data;
                    {
                        let gx = grads[*x].get_or_insert_with(|| vec![0.0; m * n]);
                        for r in 0..m {
                            for c in 0..n {
                                gx[r * n + c] += g[r * n + c] * sdata[r];
                            }
                        }
                    }
                    let gs = grads[*s].get_or_insert_with(|| vec![0.0; m]);
                    for r in 0..m {
                        for c in 0..n {
                            gs[r] += g[r * n + c] * xdata[r * n + c];
                        }
                    }
                }
                Op::DivColVec(x, s) => {
                    let (m, n) = self.dims(*x);
                    let sdata = &self.nodes[*s].data;
                    let xdata = &self.nodes[*x].data;
                    {
                        let gx = grads[*x].get_or_insert_with(|| vec![0.0; m * n]);
                        for r in 0..m {
                            for c in 0..n {
                                gx[r * n + c] += g[r * n + c] / sdata[r];
                            }
                        }
                    }
                    let gs = grads[*s].get_or_insert_with(|| vec![0.0; m]);
                    for r in 0..m {
                        let inv2 = 1.0 / (sdata[r] * sdata[r]);
                        for c in 0..n {
                            gs[r] -= g[r * n + c] * xdata[r * n + c] * inv2;
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xdata = &self.nodes[*x].data;
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xdata)
                        .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                        .collect();
                    add_into(&mut grads, *x, &gx, self);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (m, n) = self.dims(*x);
                    let nf = n as f64;
                    let xdata = &self.nodes[*x].data;
                    let gdata = &self.nodes[*gamma].data;
                    let mut gx = vec![0.0; m * n];
                    let mut ggamma = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    for r in 0..m {
                        let row = &xdata[r * n..(r + 1) * n];
                        let mean = row.iter().sum::<f64>() / nf;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        let mut xh = vec![0.0; n];
                        let mut dxh = vec![0.0; n];
                        for c in 0..n {
                            xh[c] = (row[c] - mean) * inv;
                            let gout = g[r * n + c];
                            ggamma[c] += gout * xh[c];
                            gbeta[c] += gout;
                            dxh[c] = gout * gdata[c];
                            sum_dxh += dxh[c];
                            sum_dxh_xh += dxh[c] * xh[c];
                        }
                        for c in 0..n {
                            gx[r * n + c] =
                                inv * (dxh[c] - sum_dxh / nf - xh[c] * sum_dxh_xh / nf);
                        }
                    }
                    add_into(&mut grads, *x, &gx, self);
                    add_into(&mut grads, *gamma, &ggamma, self);
                    add_into(&mut grads, *beta, &gbeta, self);
                }
                Op::SoftmaxRows(x) => {
                    let (m, n) = self.dims(*x);
                    let y = &node.data;
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        let mut dot = 0.0;
                        for c in 0..n {
                            dot += g[r * n + c] * y[r * n + c];
                        }
                        for c in 0..n {
                            gx[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
                        }
                    }
                    add_into(&mut grads, *x, &gx, self);
                }
                Op::Gather { x, index } => {
                    let len = self.nodes[*x].data.len();
                    let gx = grads[*x].get_or_insert_with(|| vec![0.0; len]);
                    for (i, &src) in index.iter().enumerate() {
                        gx[src] += g[i];
                    }
                }
                Op::Scatter { x, index, .. } => {
                    let len = self.nodes[*x].data.len();
                    let gx = grads[*x].get_or_insert_with(|| vec![0.0; len]);
                    for (i, &dst) in index.iter().enumerate() {
                        gx[i] += g[dst];
                    }
                }
                Op::StopGrad => {}
                Op::Sum(x) => {
                    let len = self.nodes[*x].data.len();
                    let gx = grads[*x].get_or_insert_with(|| vec![0.0; len]);
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::Huber { pred, target, delta } => {
                    let n = self.nodes[*pred].data.len();
                    let scale = g[0] / n as f64;
                    let mut gp = vec![0.0; n];
                    for i in 0..n {
                        let r = self.nodes[*pred].data[i] - self.nodes[*target].data[i];
                        gp[i] = scale * r.clamp(-*delta, *delta);
                    }
                    let gn: Vec<f64> = gp.iter().map(|v| -v).collect();
                    add_into(&mut grads, *pred, &gp, self);
                    add_into(&mut grads, *target, &gn, self);
                }
            }
        }
        Ok(())
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64], graph: &Graph) {
    let len = graph.nodes[id].data.len();
    debug_assert_eq!(len, g.len());
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    for (a, b) in slot.iter_mut().zip(g) {
        *a += b;
    }
}
