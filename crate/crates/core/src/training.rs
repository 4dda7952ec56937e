//! Losses, target masks and the deterministic training loop over pseudo
//! pairs built from video features only.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{TemporalInterval, TrainingView, VideoView};
use crate::error::{Error, Result};
use crate::grounding::{GroundingConfig, GroundingModel, DEFAULT_T_MAX};
use crate::nn::functions::smooth_l1_unchecked;
use crate::nn::params::clip_global_norm;
use crate::nn::{Adam, Bound, Graph, NodeId, ParamStore};
use crate::par::{self, Parallelism};
use crate::proposal::{generate_proposals, merge_consecutive, MergePolicy, TemporalProposal, DEFAULT_K};
use crate::pseudo_query::{draw_pair, select_from_scores, PairConfig, PseudoPair, SelectionMode, SelectionTransformer};
use crate::tensor::Tensor;

pub const ATTENTION_FLOOR: f64 = 1e-12;

/// Indicator of segments whose midpoint lies in the interval; never empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMask(Vec<bool>);

impl TargetMask {
    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// `mask / Σ mask` as a `1×T` row.
    pub fn normalized(&self) -> Tensor {
        let c = self.count() as f64;
        Tensor::row_vector(&self.0.iter().map(|&b| if b { 1.0 / c } else { 0.0 }).collect::<Vec<_>>())
    }
}

pub fn make_target_mask(interval: &TemporalInterval, t: usize) -> TargetMask {
    let tf = t as f64;
    let mut m: Vec<bool> = (0..t).map(|i| interval.contains((i as f64 + 0.5) / tf)).collect();
    if !m.contains(&true) {
        let mid = 0.5 * (interval.start + interval.end);
        m[((mid * tf) as usize).min(t - 1)] = true;
    }
    TargetMask(m)
}

pub fn loss_reg(pred: &TemporalInterval, target: &TemporalInterval) -> f64 {
    smooth_l1_unchecked(pred.start - target.start) + smooth_l1_unchecked(pred.end - target.end)
}

pub fn loss_att(a: &[f64], mask: &TargetMask) -> Result<f64> {
    if a.len() != mask.0.len() {
        return Err(Error::invalid("attention and mask lengths differ"));
    }
    let picked: f64 = a.iter().zip(&mask.0).filter(|(_, &m)| m).map(|(&x, _)| x.max(ATTENTION_FLOOR).ln()).sum();
    Ok(-picked / mask.count() as f64)
}

pub fn total_loss(pred: &TemporalInterval, target: &TemporalInterval, a: &[f64], mask: &TargetMask, lambda: f64) -> Result<f64> {
    Ok(loss_reg(pred, target) + lambda * loss_att(a, mask)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    LanguageFree,
    UpperBound,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    Transformer,
    /// Uniform pick among the candidates; the selector is not trained.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub xi: f64,
    pub lambda: f64,
    pub n_frames: usize,
    pub t_max: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub tau: f64,
    pub max_merge: usize,
    pub min_len: usize,
    pub hidden: usize,
    pub mode: TrainMode,
    pub selection: SelectionStrategy,
    pub use_reg_loss: bool,
    pub use_att_loss: bool,
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            k: DEFAULT_K,
            xi: 1e-4,
            lambda: 1.0,
            n_frames: 9,
            t_max: DEFAULT_T_MAX,
            batch_size: 256,
            learning_rate: 4e-4,
            epochs: 30,
            seed: 0,
            tau: 1.0,
            max_merge: 2,
            min_len: 2,
            hidden: 256,
            mode: TrainMode::LanguageFree,
            selection: SelectionStrategy::Transformer,
            use_reg_loss: true,
            use_att_loss: true,
            grad_clip: None,
        }
    }

    pub fn desk() -> Self {
        Self { batch_size: 32, hidden: 64, t_max: 32, epochs: 8, ..Self::paper() }
    }

    /// Desk settings sized for repeated ablation runs on one CPU core: a
    /// narrower model and smaller batches, so ten epochs take more optimizer
    /// steps in less time.
    pub fn bench() -> Self {
        Self { batch_size: 8, hidden: 32, epochs: 10, ..Self::desk() }
    }

    pub const PRESETS: [&'static str; 3] = ["paper", "desk", "bench"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "bench" => Ok(Self::bench()),
            other => Err(Error::invalid(format!("unknown preset {other:?} (expected paper, desk or bench)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.k, self.n_frames, self.t_max, self.batch_size, self.epochs, self.max_merge, self.min_len, self.hidden];
        if positive.contains(&0) {
            return Err(Error::invalid("k, N, T_max, batch size, epochs, max_merge, min_len and hidden must be positive"));
        }
        if !(self.lambda >= 0.0) || !(self.xi >= 0.0) || !(self.tau > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("need λ ≥ 0, ξ ≥ 0, τ > 0 and a positive learning rate"));
        }
        if !self.use_reg_loss && !self.use_att_loss {
            return Err(Error::invalid("at least one loss term must be enabled"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("gradient clip norm must be positive"));
        }
        Ok(())
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig { n_frames: self.n_frames, xi: self.xi, tau: self.tau }
    }

    pub fn merge_policy(&self) -> MergePolicy {
        MergePolicy { max_merge: self.max_merge, min_len: self.min_len }
    }

    pub fn grounding_config(&self, video_dim: usize, query_dim: usize) -> GroundingConfig {
        GroundingConfig { t_max: self.t_max, ..GroundingConfig::new(video_dim, query_dim, self.hidden) }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Grounding model and selector with their parameters.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub grounding: GroundingModel,
    pub grounding_params: ParamStore,
    pub selector: SelectionTransformer,
    pub selector_params: ParamStore,
}

impl TrainedModel {
    /// Freshly initialized model; the initialization depends only on the
    /// dimensions and `seed`.
    pub fn init(gcfg: GroundingConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query_dim = gcfg.query_dim;
        let mut grounding_params = ParamStore::new();
        let grounding = GroundingModel::new(gcfg, &mut grounding_params, &mut rng)?;
        let mut selector_params = ParamStore::new();
        let selector = SelectionTransformer::new(&mut selector_params, query_dim, &mut rng)?;
        Ok(Self { grounding, grounding_params, selector, selector_params })
    }

    pub fn fingerprint(&self) -> String {
        format!("{}{}", self.grounding_params.fingerprint(), self.selector_params.fingerprint())
    }
}

/// Scalar loss nodes of one training sample.
pub struct SampleLoss {
    pub total: NodeId,
    pub reg: NodeId,
    pub att: NodeId,
    pub selected: usize,
    pub residual: Tensor,
}

/// Builds the loss of one pair on `g`: selection, forward pass, both terms.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    g: &mut Graph<'_>,
    model: &TrainedModel,
    grounding: &Bound,
    selector: &Bound,
    segments: NodeId,
    pair: &PseudoPair,
    cfg: &TrainConfig,
    mode: &SelectionMode,
) -> Result<SampleLoss> {
    let cands = g.constant(pair.candidates.features.clone());
    let (query, selected, residual) = match cfg.selection {
        SelectionStrategy::Transformer => {
            let scores = model.selector.scores(g, selector, cands)?;
            let sel = select_from_scores(g, scores, cands, cfg.tau, Some(&pair.gumbel), mode)?;
            (sel.feature, sel.index, sel.residual)
        }
        SelectionStrategy::Random => {
            let row = pair.candidates.features.slice_rows(pair.random_pick, 1);
            (g.constant(row), pair.random_pick, Tensor::zeros(1, pair.candidates.len()))
        }
    };
    let nodes = model.grounding.forward_nodes(g, grounding, segments, query)?;
    let target = g.constant(Tensor::row_vector(&[pair.target.start, pair.target.end]));
    let diff = g.sub(nodes.prediction, target)?;
    let hub = g.smooth_l1(diff);
    let reg = g.sum(hub);
    let t = g.value(segments).rows();
    let mask = make_target_mask(&pair.target, t);
    let log_a = g.log_clamped(nodes.attention, ATTENTION_FLOOR);
    let mean_log = g.weighted_sum(log_a, mask.normalized())?;
    let att = g.scale(mean_log, -1.0);
    let total = match (cfg.use_reg_loss, cfg.use_att_loss) {
        (true, true) => {
            let weighted = g.scale(att, cfg.lambda);
            g.add(reg, weighted)?
        }
        (true, false) => reg,
        (false, _) => g.scale(att, cfg.lambda),
    };
    Ok(SampleLoss { total, reg, att, selected, residual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub loss_reg: f64,
    pub loss_att: f64,
    pub total: f64,
}

pub fn write_loss_csv(path: &Path, curve: &[StepLoss]) -> Result<()> {
    let mut out = String::from("step,epoch,loss_reg,loss_att,total\n");
    for s in curve {
        out.push_str(&format!("{},{},{},{},{}\n", s.step, s.epoch, s.loss_reg, s.loss_att, s.total));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub curve: Vec<StepLoss>,
    pub epoch_means: Vec<f64>,
    /// Pairs dropped because their interval held no frames.
    pub skipped_pairs: usize,
    pub proposals: Vec<Vec<TemporalProposal>>,
}

/// Proposals for every video: clustered in language-free mode, ground-truth
/// events (merged by the same policy) in upper-bound mode.
pub fn build_proposals(view: &TrainingView<'_>, cfg: &TrainConfig, mode: Parallelism) -> Result<Vec<Vec<TemporalProposal>>> {
    match cfg.mode {
        TrainMode::LanguageFree => {
            let videos: Vec<VideoView<'_>> = view.videos().collect();
            let per_video = par::map(mode, &videos, |v| {
                if v.num_segments() < cfg.k {
                    return Ok(Vec::new());
                }
                generate_proposals(v.segment_features, cfg.k, cfg.merge_policy(), cfg.seed)
            });
            per_video.into_iter().collect()
        }
        TrainMode::UpperBound => (0..view.len())
            .map(|i| {
                let t = view.video(i).num_segments();
                let events = view
                    .ground_truth_events(i)
                    .ok_or_else(|| Error::invalid(format!("video {} has no ground-truth events", view.video(i).id)))?;
                let spans: Vec<(usize, usize)> = events.iter().map(|e| (e.first, e.last)).collect();
                Ok(merge_consecutive(&spans, cfg.merge_policy(), t))
            })
            .collect(),
    }
}

fn pair_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64 + 1) << 32) | index as u64);
    rng
}

struct SampleResult {
    reg: f64,
    att: f64,
    total: f64,
    grads: (Vec<Tensor>, Vec<Tensor>),
}

fn sample_gradients(model: &TrainedModel, segments: &Tensor, pair: &PseudoPair, cfg: &TrainConfig) -> Result<SampleResult> {
    let mut g = Graph::new();
    let gp = g.bind(&model.grounding_params);
    let sp = g.bind(&model.selector_params);
    let seg = g.constant_ref(segments);
    let l = sample_loss(&mut g, model, &gp, &sp, seg, pair, cfg, &SelectionMode::Hard)?;
    let grads = g.backward(l.total)?;
    Ok(SampleResult {
        reg: g.scalar(l.reg),
        att: g.scalar(l.att),
        total: g.scalar(l.total),
        grads: (grads.for_params(&gp, &model.grounding_params), grads.for_params(&sp, &model.selector_params)),
    })
}

fn accumulate(into: &mut [Tensor], from: &[Tensor]) {
    for (a, b) in into.iter_mut().zip(from) {
        a.add_assign(b);
    }
}

pub fn train(view: &TrainingView<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(view, cfg, Parallelism::default())
}

/// Minibatch Adam over one pair per (video, proposal) per epoch. The result
/// is bit-identical for every [`Parallelism`] because per-sample gradients
/// are summed in batch order.
pub fn train_with(view: &TrainingView<'_>, cfg: &TrainConfig, mode: Parallelism) -> Result<TrainOutcome> {
    cfg.validate()?;
    if view.is_empty() {
        return Err(Error::TrainingData("no training videos".into()));
    }
    let first = view.video(0);
    let (video_dim, query_dim) = (first.segment_features.cols(), first.frame_features.cols());
    if view.videos().any(|v| v.segment_features.cols() != video_dim || v.frame_features.cols() != query_dim) {
        return Err(Error::TrainingData("videos disagree on feature dimensions".into()));
    }
    if let Some(v) = view.videos().find(|v| v.num_segments() > cfg.t_max) {
        return Err(Error::invalid(format!("video {} has {} segments, more than T_max = {}", v.id, v.num_segments(), cfg.t_max)));
    }
    let mut model = TrainedModel::init(cfg.grounding_config(video_dim, query_dim), cfg.seed)?;
    let proposals = build_proposals(view, cfg, mode)?;
    let slots: Vec<(usize, usize)> =
        proposals.iter().enumerate().flat_map(|(v, ps)| (0..ps.len()).map(move |p| (v, p))).collect();
    if slots.is_empty() {
        return Err(Error::TrainingData("no video yielded a proposal".into()));
    }

    let mut opt_g = Adam::new(&model.grounding_params, cfg.learning_rate);
    let mut opt_s = Adam::new(&model.selector_params, cfg.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let pair_cfg = cfg.pair_config();
    let mut curve = Vec::new();
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    let mut skipped_pairs = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let drawn = par::map_range(mode, slots.len(), |i| {
            let (v, p) = slots[i];
            draw_pair(v, &view.video(v), &proposals[v][p], &pair_cfg, &mut pair_rng(cfg.seed, epoch, i))
        });
        let mut pairs = Vec::with_capacity(drawn.len());
        for d in drawn {
            match d {
                Ok(p) => pairs.push(p),
                Err(Error::SkipProposal(_)) => skipped_pairs += 1,
                Err(e) => return Err(e),
            }
        }
        if pairs.is_empty() {
            return Err(Error::TrainingData("every proposal lacks frames".into()));
        }
        pairs.shuffle(&mut order_rng);
        let mut epoch_total = 0.0;
        for batch in pairs.chunks(cfg.batch_size) {
            let results = par::map(mode, batch, |pair| sample_gradients(&model, view.video(pair.video).segment_features, pair, cfg));
            let mut grad_g: Vec<Tensor> = model.grounding_params.values().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
            let mut grad_s: Vec<Tensor> = model.selector_params.values().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
            let (mut reg, mut att, mut total) = (0.0, 0.0, 0.0);
            for r in results {
                let r = r?;
                reg += r.reg;
                att += r.att;
                total += r.total;
                accumulate(&mut grad_g, &r.grads.0);
                accumulate(&mut grad_s, &r.grads.1);
            }
            let n = batch.len() as f64;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            grad_g.iter_mut().chain(grad_s.iter_mut()).for_each(|t| t.scale_in_place(1.0 / n));
            if let Some(max) = cfg.grad_clip {
                let mut all: Vec<Tensor> = grad_g.drain(..).chain(grad_s.drain(..)).collect();
                clip_global_norm(&mut all, max);
                grad_s = all.split_off(model.grounding_params.len());
                grad_g = all;
            }
            opt_g.step(&mut model.grounding_params, &grad_g);
            if cfg.selection == SelectionStrategy::Transformer {
                opt_s.step(&mut model.selector_params, &grad_s);
            }
            curve.push(StepLoss { step, epoch, loss_reg: reg / n, loss_att: att / n, total: total / n });
            epoch_total += total;
            step += 1;
        }
        epoch_means.push(epoch_total / pairs.len() as f64);
    }
    if !model.grounding_params.all_finite() || !model.selector_params.all_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    Ok(TrainOutcome { model, curve, epoch_means, skipped_pairs, proposals })
}
