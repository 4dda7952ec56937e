//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter the
//! tape by reference through [`Graph::bind`]; [`Graph::backward`] walks the
//! tape once in reverse and returns per-node gradients.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow { a: NodeId, row: NodeId },
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    ConcatCols(Vec<NodeId>),
    SliceCols { a: NodeId, start: usize },
    Transpose(NodeId),
    L2NormalizeRows { a: NodeId, norms: Vec<f64> },
    StraightThrough(NodeId),
    AddConst(NodeId),
    SortPair { a: NodeId, swapped: bool },
    LogClamped { a: NodeId, floor: f64 },
    SmoothL1(NodeId),
    SumAll(NodeId),
    WeightedSum { a: NodeId, weights: Tensor },
    Gru(Box<GruCache>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul { trans_b: false, .. } => "matmul",
            Op::MatMul { trans_b: true, .. } => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow { .. } => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(_) => "transpose",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::StraightThrough(_) => "straight_through",
            Op::AddConst(_) => "add_const",
            Op::SortPair { .. } => "sort_pair",
            Op::LogClamped { .. } => "log",
            Op::SmoothL1(_) => "smooth_l1",
            Op::SumAll(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Gru(_) => "gru",
        }
    }
}

#[derive(Debug)]
struct GruCache {
    xproj: NodeId,
    w_hh: NodeId,
    b_hh: NodeId,
    reverse: bool,
    // Per processed step, in processing order.
    h_prev: Tensor,
    r: Tensor,
    z: Tensor,
    n: Tensor,
    hn_lin: Tensor,
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
}

/// Parameters of one [`ParamStore`] bound into a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    #[inline]
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.index()]
    }

    /// Node of the `index`-th parameter in store order.
    pub fn at(&self, index: usize) -> NodeId {
        self.nodes[index]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of every parameter in `bound`; zeros where the loss does
    /// not depend on the parameter.
    pub fn for_params(&self, bound: &Bound, store: &ParamStore) -> Vec<Tensor> {
        bound
            .nodes
            .iter()
            .zip(store.values())
            .map(|(id, v)| self.grads[id.0].clone().unwrap_or_else(|| Tensor::zeros(v.rows(), v.cols())))
            .collect()
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {}x{} and {}x{}", a.0, a.1, b.0, b.1))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    /// Operation names in execution order, excluding leaves.
    pub fn trace(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Param))
            .map(|n| n.op.name())
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value: Cow::Owned(value) });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value: Cow::Borrowed(value) });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds every parameter of `store` as a differentiable leaf.
    pub fn bind(&mut self, store: &'a ParamStore) -> Bound {
        let nodes = store
            .values()
            .iter()
            .map(|v| {
                self.nodes.push(Node { op: Op::Param, value: Cow::Borrowed(v) });
                NodeId(self.nodes.len() - 1)
            })
            .collect();
        Bound { nodes }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let mut out = Tensor::zeros(va.rows(), vb.cols());
        gemm(va, false, vb, false, &mut out, 0.0);
        Ok(self.push(Op::MatMul { a, b, trans_b: false }, out))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("matmul_nt", va.shape(), vb.shape()));
        }
        let mut out = Tensor::zeros(va.rows(), vb.rows());
        gemm(va, false, vb, true, &mut out, 0.0);
        Ok(self.push(Op::MatMul { a, b, trans_b: true }, out))
    }

    fn zip_same(&self, op: &str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Adds a `1×C` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", va.shape(), vr.shape()));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow { a, row }, out))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Row-wise layer normalization with learned gain and bias (`1×C` each).
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != (1, va.cols()) || vb.shape() != (1, va.cols()) {
            return Err(shape_err("layer_norm", va.shape(), vg.shape()));
        }
        let c = va.cols() as f64;
        let mut xhat = Tensor::zeros(va.rows(), va.cols());
        let mut out = Tensor::zeros(va.rows(), va.cols());
        let mut inv_std = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..row.len() {
                let xh = (row[j] - mean) * is;
                xhat.set(r, j, xh);
                out.set(r, j, xh * vg.data()[j] + vb.data()[j]);
            }
        }
        Ok(self.push(Op::LayerNorm { a, gain, bias, xhat, inv_std }, out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.cols() || len == 0 {
            return Err(Error::invalid(format!(
                "slice_cols: columns {start}..{} out of range for width {}",
                start + len,
                va.cols()
            )));
        }
        let mut out = Tensor::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { a, start }, out))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::invalid(format!("l2_normalize: row {r} has norm {n}")));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        Ok(self.push(Op::L2NormalizeRows { a, norms }, out))
    }

    /// Forward value is the row-wise one-hot argmax of `a`; the backward pass
    /// treats the op as the identity.
    pub fn straight_through(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            out.set(r, argmax(va.row(r)), 1.0);
        }
        self.push(Op::StraightThrough(a), out)
    }

    /// `a + offset` with `offset` held constant; the straight-through
    /// estimator with a frozen hard residual `one_hot − soft`.
    pub fn add_const(&mut self, a: NodeId, offset: &Tensor) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape() != offset.shape() {
            return Err(shape_err("add_const", va.shape(), offset.shape()));
        }
        let mut out = va.clone();
        out.add_assign(offset);
        Ok(self.push(Op::AddConst(a), out))
    }

    /// Orders a `1×2` row as `(min, max)`.
    pub fn sort_pair(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape() != (1, 2) {
            return Err(shape_err("sort_pair", va.shape(), (1, 2)));
        }
        let (x, y) = (va.data()[0], va.data()[1]);
        let swapped = y < x;
        let out = Tensor::row_vector(&[x.min(y), x.max(y)]);
        Ok(self.push(Op::SortPair { a, swapped }, out))
    }

    /// `ln(max(a, floor))`; zero gradient where the floor is active.
    pub fn log_clamped(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(Op::LogClamped { a, floor }, v)
    }

    pub fn smooth_l1(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(crate::nn::functions::smooth_l1_unchecked);
        self.push(Op::SmoothL1(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Tensor::row_vector(&[s]))
    }

    /// `Σ a ⊙ weights` for a constant weight tensor.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Tensor) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape() != weights.shape() {
            return Err(shape_err("weighted_sum", va.shape(), weights.shape()));
        }
        let s = crate::tensor::dot(va.data(), weights.data());
        Ok(self.push(Op::WeightedSum { a, weights }, Tensor::row_vector(&[s])))
    }

    /// One direction of a GRU layer.
    ///
    /// `xproj` is the precomputed input projection `x·W_ih + b_ih` (`T×3h`,
    /// gate blocks ordered reset, update, candidate). Returns `T×h` hidden
    /// states aligned with input positions; `reverse` scans from the end.
    pub fn gru(&mut self, xproj: NodeId, w_hh: NodeId, b_hh: NodeId, reverse: bool) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(xproj), self.value(w_hh), self.value(b_hh));
        let h = vw.rows();
        if vw.cols() != 3 * h || vx.cols() != 3 * h || vb.shape() != (1, 3 * h) {
            return Err(shape_err("gru", vx.shape(), vw.shape()));
        }
        let t_len = vx.rows();
        let mut out = Tensor::zeros(t_len, h);
        let mut cache_h = Tensor::zeros(t_len, h);
        let mut cache_r = Tensor::zeros(t_len, h);
        let mut cache_z = Tensor::zeros(t_len, h);
        let mut cache_n = Tensor::zeros(t_len, h);
        let mut cache_hn = Tensor::zeros(t_len, h);
        let mut h_prev = vec![0.0; h];
        let mut gh = vec![0.0; 3 * h];
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            gh.copy_from_slice(vb.data());
            for (i, &hp) in h_prev.iter().enumerate() {
                if hp != 0.0 {
                    for (g, w) in gh.iter_mut().zip(vw.row(i)) {
                        *g += hp * w;
                    }
                }
            }
            let xr = vx.row(t);
            cache_h.row_mut(step).copy_from_slice(&h_prev);
            for j in 0..h {
                let r = sigmoid(xr[j] + gh[j]);
                let z = sigmoid(xr[h + j] + gh[h + j]);
                let hn = gh[2 * h + j];
                let n = (xr[2 * h + j] + r * hn).tanh();
                let hnew = (1.0 - z) * n + z * h_prev[j];
                cache_r.set(step, j, r);
                cache_z.set(step, j, z);
                cache_n.set(step, j, n);
                cache_hn.set(step, j, hn);
                out.set(t, j, hnew);
            }
            h_prev.copy_from_slice(out.row(t));
        }
        let cache = GruCache {
            xproj,
            w_hh,
            b_hh,
            reverse,
            h_prev: cache_h,
            r: cache_r,
            z: cache_z,
            n: cache_n,
            hn_lin: cache_hn,
        };
        Ok(self.push(Op::Gru(Box::new(cache)), out))
    }

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::invalid("backward requires a scalar loss node"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::MatMul { a, b, trans_b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    // da = dy · op(b)ᵀ
                    gemm(&dy, false, vb, !trans_b, &mut da, 0.0);
                    let mut db = Tensor::zeros(vb.rows(), vb.cols());
                    if *trans_b {
                        gemm(&dy, true, va, false, &mut db, 0.0);
                    } else {
                        gemm(va, true, &dy, false, &mut db, 0.0);
                    }
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *b, dy.clone());
                    accum(&mut grads, *a, dy);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *b, dy.map(|x| -x));
                    accum(&mut grads, *a, dy);
                }
                Op::AddRow { a, row } => {
                    let mut dr = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (d, g) in dr.data_mut().iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    accum(&mut grads, *row, dr);
                    accum(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accum(&mut grads, *a, zip(&dy, vb, |g, y| g * y));
                    accum(&mut grads, *b, zip(&dy, va, |g, x| g * x));
                }
                Op::Scale(a, s) => accum(&mut grads, *a, dy.map(|g| g * s)),
                Op::Tanh(a) => accum(&mut grads, *a, zip(&dy, &node.value, |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(a) => accum(&mut grads, *a, zip(&dy, &node.value, |g, y| g * y * (1.0 - y))),
                Op::Gelu(a) => accum(&mut grads, *a, zip(&dy, self.value(*a), |g, x| g * gelu_grad(x))),
                Op::Relu(a) => {
                    accum(&mut grads, *a, zip(&dy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }))
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[j] * (gr[j] - s);
                        }
                    }
                    accum(&mut grads, *a, dx);
                }
                Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                    let vg = self.value(*gain);
                    let c = xhat.cols();
                    let mut dgain = Tensor::zeros(1, c);
                    let mut dbias = Tensor::zeros(1, c);
                    let mut dx = Tensor::zeros(xhat.rows(), c);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..xhat.rows() {
                        let (gr, xr) = (dy.row(r), xhat.row(r));
                        for j in 0..c {
                            dgain.data_mut()[j] += gr[j] * xr[j];
                            dbias.data_mut()[j] += gr[j];
                            dxhat[j] = gr[j] * vg.data()[j];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(d, x)| d * x).sum();
                        let k = inv_std[r] / c as f64;
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = k * (c as f64 * dxhat[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                    accum(&mut grads, *gain, dgain);
                    accum(&mut grads, *bias, dbias);
                    accum(&mut grads, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Tensor::zeros(dy.rows(), w);
                        for r in 0..dy.rows() {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + w]);
                        }
                        off += w;
                        accum(&mut grads, p, dp);
                    }
                }
                Op::SliceCols { a, start } => {
                    let va = self.value(*a);
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..dy.rows() {
                        da.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    accum(&mut grads, *a, da);
                }
                Op::Transpose(a) => accum(&mut grads, *a, dy.transpose()),
                Op::L2NormalizeRows { a, norms } => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = (gr[j] - yr[j] * proj) / norms[r];
                        }
                    }
                    accum(&mut grads, *a, dx);
                }
                Op::StraightThrough(a) | Op::AddConst(a) => accum(&mut grads, *a, dy),
                Op::SortPair { a, swapped } => {
                    let d = dy.data();
                    let da = if *swapped { Tensor::row_vector(&[d[1], d[0]]) } else { dy.clone() };
                    accum(&mut grads, *a, da);
                }
                Op::LogClamped { a, floor } => {
                    let da = zip(&dy, self.value(*a), |g, x| if x > *floor { g / x } else { 0.0 });
                    accum(&mut grads, *a, da);
                }
                Op::SmoothL1(a) => {
                    let da = zip(&dy, self.value(*a), |g, x| if x.abs() < 1.0 { g * x } else { g * x.signum() });
                    accum(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    accum(&mut grads, *a, Tensor::filled(va.rows(), va.cols(), dy.data()[0]));
                }
                Op::WeightedSum { a, weights } => {
                    let g = dy.data()[0];
                    accum(&mut grads, *a, weights.map(|w| w * g));
                }
                Op::Gru(cache) => self.gru_backward(cache, &dy, &mut grads),
            }
        }
        Ok(Grads { grads })
    }

    fn gru_backward(&self, c: &GruCache, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let vw = self.value(c.w_hh);
        let h = vw.rows();
        let t_len = dout.rows();
        let mut dxproj = Tensor::zeros(t_len, 3 * h);
        let mut dgates = Tensor::zeros(t_len, 3 * h);
        let mut dh_carry = vec![0.0; h];
        let mut dh = vec![0.0; h];
        for step in (0..t_len).rev() {
            let t = if c.reverse { t_len - 1 - step } else { step };
            for j in 0..h {
                dh[j] = dout.get(t, j) + dh_carry[j];
            }
            let hp = c.h_prev.row(step);
            for j in 0..h {
                let (r, z, n, hn) = (c.r.get(step, j), c.z.get(step, j), c.n.get(step, j), c.hn_lin.get(step, j));
                let dn_pre = dh[j] * (1.0 - z) * (1.0 - n * n);
                let dz_pre = dh[j] * (hp[j] - n) * z * (1.0 - z);
                let dr_pre = dn_pre * hn * r * (1.0 - r);
                dxproj.set(t, j, dr_pre);
                dxproj.set(t, h + j, dz_pre);
                dxproj.set(t, 2 * h + j, dn_pre);
                dgates.set(step, j, dr_pre);
                dgates.set(step, h + j, dz_pre);
                dgates.set(step, 2 * h + j, dn_pre * r);
                dh_carry[j] = dh[j] * z;
            }
            // dh_prev += dgates · W_hhᵀ
            let dg = dgates.row(step);
            for (i, carry) in dh_carry.iter_mut().enumerate() {
                *carry += crate::tensor::dot(vw.row(i), dg);
            }
        }
        let mut dw = Tensor::zeros(h, 3 * h);
        gemm(&c.h_prev, true, &dgates, false, &mut dw, 0.0);
        let mut db = Tensor::zeros(1, 3 * h);
        for r in 0..t_len {
            for (d, g) in db.data_mut().iter_mut().zip(dgates.row(r)) {
                *d += g;
            }
        }
        accum(grads, c.w_hh, dw);
        accum(grads, c.b_hh, db);
        accum(grads, c.xproj, dxproj);
    }
}

fn accum(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
