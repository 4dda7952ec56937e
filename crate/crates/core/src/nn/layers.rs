use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Bound, Graph, NodeId};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
    #[default]
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        match self {
            Activation::Linear => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_matrix(format!("{name}.weight"), in_dim, out_dim, rng);
        let b = Some(store.add_zeros(format!("{name}.bias"), 1, out_dim));
        Self { w, b, in_dim, out_dim }
    }

    /// Affine map without bias, for outputs that feed a shift-invariant softmax.
    pub fn new_unbiased(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_matrix(format!("{name}.weight"), in_dim, out_dim, rng);
        Self { w, b: None, in_dim, out_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: NodeId) -> Result<NodeId> {
        if g.value(x).cols() != self.in_dim {
            return Err(Error::invalid(format!(
                "linear layer expects {} input columns, got {}",
                self.in_dim,
                g.value(x).cols()
            )));
        }
        let y = g.matmul(x, p.node(self.w))?;
        match self.b {
            Some(b) => g.add_row(y, p.node(b)),
            None => Ok(y),
        }
    }
}

/// Affine layers with `activation` between them; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(store, name, sizes, activation, true, rng)
    }

    /// Like [`Mlp::new`] but the output layer has no bias; used for scorers
    /// whose outputs are normalized by a softmax over positions.
    pub fn scorer(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(store, name, sizes, activation, false, rng)
    }

    fn build(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        final_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("MLP needs at least two positive layer sizes, got {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let n = format!("{name}.{i}");
                if i == last && !final_bias {
                    Linear::new_unbiased(store, &n, w[0], w[1], rng)
                } else {
                    Linear::new(store, &n, w[0], w[1], rng)
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add_filled(format!("{name}.gain"), 1, dim, 1.0);
        let bias = store.add_zeros(format!("{name}.bias"), 1, dim);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, p.node(self.gain), p.node(self.bias))
    }
}

/// Scaled dot-product attention with `heads` heads and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
    model_dim: usize,
}

/// Output of one attention call: projected values plus per-head weights.
pub struct AttentionOutput {
    pub output: NodeId,
    pub weights: Vec<NodeId>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::invalid(format!("model width {model_dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), query_dim, model_dim, rng),
            // A key bias shifts every score of a query row equally, which the
            // softmax cancels; it would be a parameter with zero gradient.
            key: Linear::new_unbiased(store, &format!("{name}.key"), kv_dim, model_dim, rng),
            value: Linear::new(store, &format!("{name}.value"), kv_dim, model_dim, rng),
            output: Linear::new(store, &format!("{name}.output"), model_dim, model_dim, rng),
            heads,
            model_dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, q: NodeId, k: NodeId, v: NodeId) -> Result<AttentionOutput> {
        if g.value(k).rows() != g.value(v).rows() {
            return Err(Error::invalid(format!(
                "attention keys ({} rows) and values ({} rows) differ in length",
                g.value(k).rows(),
                g.value(v).rows()
            )));
        }
        let qp = self.query.forward(g, p, q)?;
        let kp = self.key.forward(g, p, k)?;
        let vp = self.value.forward(g, p, v)?;
        let dk = self.model_dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (g.slice_cols(qp, h * dk, dk)?, g.slice_cols(kp, h * dk, dk)?, g.slice_cols(vp, h * dk, dk)?)
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores);
            heads.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let output = self.output.forward(g, p, cat)?;
        Ok(AttentionOutput { output, weights })
    }
}

#[derive(Clone, Debug)]
struct GruDirection {
    input: Linear,
    w_hh: ParamId,
    b_hh: ParamId,
}

impl GruDirection {
    fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), in_dim, 3 * hidden, rng);
        let w_hh = store.add_matrix(format!("{name}.recurrent.weight"), hidden, 3 * hidden, rng);
        let b_hh = store.add_zeros(format!("{name}.recurrent.bias"), 1, 3 * hidden);
        Self { input, w_hh, b_hh }
    }

    fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: NodeId, reverse: bool) -> Result<NodeId> {
        let xproj = self.input.forward(g, p, x)?;
        g.gru(xproj, p.node(self.w_hh), p.node(self.b_hh), reverse)
    }
}

/// Stacked bidirectional GRU; each position gets `[forward ⊕ backward]` of
/// the top layer, width `2·hidden`.
#[derive(Clone, Debug)]
pub struct BiGru {
    layers: Vec<(GruDirection, GruDirection)>,
    hidden: usize,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        if layers == 0 || hidden == 0 {
            return Err(Error::invalid("bi-GRU needs at least one layer and a positive hidden size"));
        }
        let layers = (0..layers)
            .map(|l| {
                let d_in = if l == 0 { in_dim } else { 2 * hidden };
                (
                    GruDirection::new(store, &format!("{name}.{l}.fwd"), d_in, hidden, rng),
                    GruDirection::new(store, &format!("{name}.{l}.bwd"), d_in, hidden, rng),
                )
            })
            .collect();
        Ok(Self { layers, hidden })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: NodeId) -> Result<NodeId> {
        if g.value(x).rows() == 0 {
            return Err(Error::invalid("bi-GRU input sequence is empty"));
        }
        let mut h = x;
        for (fwd, bwd) in &self.layers {
            let f = fwd.forward(g, p, h, false)?;
            let b = bwd.forward(g, p, h, true)?;
            h = g.concat_cols(&[f, b])?;
        }
        Ok(h)
    }
}

/// Post-norm transformer encoder layer: self-attention and a feed-forward
/// block, each followed by residual addition and layer normalization.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attention: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn_dim, dim], Activation::Gelu, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let a = self.attention.forward(g, p, x, x, x)?.output;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, p, h)?;
        let f = self.ffn.forward(g, p, h)?;
        let h2 = g.add(h, f)?;
        self.norm2.forward(g, p, h2)
    }
}

/// Applies `mlp` to `x` outside of any training graph.
pub fn mlp_apply(x: &Tensor, mlp: &Mlp, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.bind(store);
    let xn = g.constant(x.clone());
    let y = mlp.forward(&mut g, &p, xn)?;
    Ok(g.value(y).clone())
}

/// Multi-head attention of `q` over `(k, v)` outside of any training graph.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, attn: &MultiHeadAttention, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.bind(store);
    let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = attn.forward(&mut g, &p, qn, kn, vn)?;
    Ok(g.value(out.output).clone())
}

/// Bi-GRU encoding of `x` outside of any training graph.
pub fn bigru_encode(x: &Tensor, gru: &BiGru, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.bind(store);
    let xn = g.constant(x.clone());
    let y = gru.forward(&mut g, &p, xn)?;
    Ok(g.value(y).clone())
}
