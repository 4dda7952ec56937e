//! Video grounding model: projected, position-encoded segment features pass a
//! bi-GRU, are fused with one language token by stacked cross- and
//! self-attention, pooled by a temporal attention scorer and regressed to a
//! normalized `(start, end)`.
//!
//! The same graph is used for pseudo features during training and for text
//! features at inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::TemporalInterval;
use crate::error::{Error, Result};
use crate::nn::functions::positional_encoding;
use crate::nn::{Activation, BiGru, Bound, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, NodeId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_T_MAX: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub video_dim: usize,
    pub query_dim: usize,
    /// Model width; must be divisible by `2` and by `heads`.
    pub hidden: usize,
    pub gru_layers: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub t_max: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl GroundingConfig {
    pub fn new(video_dim: usize, query_dim: usize, hidden: usize) -> Self {
        Self { video_dim, query_dim, hidden, gru_layers: 2, fusion_layers: 3, heads: 4, t_max: DEFAULT_T_MAX, activation: Activation::Gelu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.video_dim == 0 || self.query_dim == 0 || self.hidden == 0 {
            return Err(Error::invalid("grounding dimensions must be positive"));
        }
        if self.hidden % 2 != 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::invalid(format!("hidden size {} must be even and divisible by {} heads", self.hidden, self.heads)));
        }
        if self.gru_layers == 0 || self.t_max == 0 {
            return Err(Error::invalid("bi-GRU layers and T_max must be positive"));
        }
        Ok(())
    }
}

/// Cross-attention over a single language token. Softmax over one key is
/// identically 1, so the block reduces to its value and output projections
/// broadcast to every position; query and key projections would be inert.
#[derive(Clone, Debug)]
struct TokenCrossAttention {
    value: Linear,
    output: Linear,
}

impl TokenCrossAttention {
    fn forward(&self, g: &mut Graph<'_>, p: &Bound, h: NodeId, q: NodeId) -> Result<NodeId> {
        let v = self.value.forward(g, p, q)?;
        let o = self.output.forward(g, p, v)?;
        g.add_row(h, o)
    }
}

#[derive(Clone, Debug)]
struct FusionLayer {
    cross: TokenCrossAttention,
    cross_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct GroundingModel {
    cfg: GroundingConfig,
    projection: Linear,
    gru: BiGru,
    merge: Mlp,
    fusion: Vec<FusionLayer>,
    scorer: Mlp,
    head: Mlp,
}

/// Intermediate nodes of one forward pass.
pub struct ForwardNodes {
    pub encoded: NodeId,
    pub fused: NodeId,
    /// `1×T` temporal attention.
    pub attention: NodeId,
    /// `1×2` ordered `(start, end)`.
    pub prediction: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingOutput {
    pub prediction: TemporalInterval,
    pub attention: Vec<f64>,
    pub fused: Tensor,
}

impl GroundingModel {
    pub fn new(cfg: GroundingConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let act = cfg.activation;
        let projection = Linear::new(store, "video.projection", cfg.video_dim, d, rng);
        let gru = BiGru::new(store, "video.bigru", d, d / 2, cfg.gru_layers, rng)?;
        let merge = Mlp::new(store, "video.merge", &[2 * d, d, d], act, rng)?;
        let fusion = (0..cfg.fusion_layers)
            .map(|l| {
                Ok(FusionLayer {
                    cross: TokenCrossAttention {
                        value: Linear::new(store, &format!("fusion.{l}.cross.value"), cfg.query_dim, d, rng),
                        output: Linear::new(store, &format!("fusion.{l}.cross.output"), d, d, rng),
                    },
                    cross_norm: LayerNorm::new(store, &format!("fusion.{l}.cross_norm"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("fusion.{l}.self"), d, d, d, cfg.heads, rng)?,
                    self_norm: LayerNorm::new(store, &format!("fusion.{l}.self_norm"), d),
                })
            })
            .collect::<Result<_>>()?;
        let scorer = Mlp::scorer(store, "scorer", &[d, d, 1], act, rng)?;
        let head = Mlp::new(store, "head", &[d, d, 2], act, rng)?;
        Ok(Self { cfg, projection, gru, merge, fusion, scorer, head })
    }

    pub fn config(&self) -> &GroundingConfig {
        &self.cfg
    }

    /// Final layer of the regression head.
    pub fn head_output(&self) -> &Linear {
        self.head.layers().last().expect("head has layers")
    }

    /// Per-position video encoding `s`, `T×hidden`.
    pub fn encode_video(&self, g: &mut Graph<'_>, p: &Bound, f: NodeId) -> Result<NodeId> {
        let (t, cols) = g.value(f).shape();
        if t == 0 {
            return Err(Error::invalid("video has no segments"));
        }
        if t > self.cfg.t_max {
            return Err(Error::invalid(format!("video has {t} segments, more than T_max = {}", self.cfg.t_max)));
        }
        if cols != self.cfg.video_dim {
            return Err(Error::invalid(format!("expected {}-dimensional segment features, got {cols}", self.cfg.video_dim)));
        }
        let proj = self.projection.forward(g, p, f)?;
        let pe = g.constant(positional_encoding(t, self.cfg.hidden)?);
        let fhat = g.add(proj, pe)?;
        let h = self.gru.forward(g, p, fhat)?;
        let cat = g.concat_cols(&[h, fhat])?;
        self.merge.forward(g, p, cat)
    }

    /// Fusion with the `1×D_q` language token; returns the fused sequence and
    /// the `1×T` temporal attention.
    pub fn fuse(&self, g: &mut Graph<'_>, p: &Bound, s: NodeId, q: NodeId) -> Result<(NodeId, NodeId)> {
        if g.value(q).shape() != (1, self.cfg.query_dim) {
            return Err(Error::invalid(format!(
                "language feature must be 1×{}, got {:?}",
                self.cfg.query_dim,
                g.value(q).shape()
            )));
        }
        let mut h = s;
        for layer in &self.fusion {
            let r = layer.cross.forward(g, p, h, q)?;
            h = layer.cross_norm.forward(g, p, r)?;
            let sa = layer.self_attn.forward(g, p, h, h, h)?.output;
            let r = g.add(h, sa)?;
            h = layer.self_norm.forward(g, p, r)?;
        }
        let logits = self.scorer.forward(g, p, h)?;
        let logits = g.transpose(logits);
        let a = g.softmax_rows(logits);
        Ok((h, a))
    }

    /// Attention-pooled regression to an ordered pair in `[0, 1]²`.
    pub fn predict_interval(&self, g: &mut Graph<'_>, p: &Bound, fused: NodeId, a: NodeId) -> Result<NodeId> {
        let pooled = g.matmul(a, fused)?;
        let raw = self.head.forward(g, p, pooled)?;
        let u = g.sigmoid(raw);
        g.sort_pair(u)
    }

    pub fn forward_nodes(&self, g: &mut Graph<'_>, p: &Bound, f: NodeId, q: NodeId) -> Result<ForwardNodes> {
        let encoded = self.encode_video(g, p, f)?;
        let (fused, attention) = self.fuse(g, p, encoded, q)?;
        let prediction = self.predict_interval(g, p, fused, attention)?;
        Ok(ForwardNodes { encoded, fused, attention, prediction })
    }

    /// Inference on plain tensors; deterministic.
    pub fn forward(&self, store: &ParamStore, f: &Tensor, query: &[f64]) -> Result<GroundingOutput> {
        let mut g = Graph::new();
        let p = g.bind(store);
        let fnode = g.constant_ref(f);
        let q = g.constant(Tensor::row_vector(query));
        let n = self.forward_nodes(&mut g, &p, fnode, q)?;
        let pred = g.value(n.prediction);
        Ok(GroundingOutput {
            prediction: TemporalInterval::new(pred.get(0, 0), pred.get(0, 1))?,
            attention: g.value(n.attention).row(0).to_vec(),
            fused: g.value(n.fused).clone(),
        })
    }
}
