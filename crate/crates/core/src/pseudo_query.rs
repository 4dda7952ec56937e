//! Pseudo language features: frames sampled inside a proposal, perturbed on
//! the unit sphere, and reduced to one feature by a small selection
//! transformer with a Gumbel-softmax choice.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{TemporalInterval, VideoView};
use crate::error::{Error, Result};
use crate::nn::functions::gumbel_noise;
use crate::nn::graph::argmax;
use crate::nn::{Bound, EncoderLayer, Graph, Linear, NodeId, ParamStore};
use crate::proposal::TemporalProposal;
use crate::tensor::{l2_norm, Tensor};

pub const DEFAULT_N_FRAMES: usize = 9;
pub const DEFAULT_XI: f64 = 1e-4;
pub const SELECTOR_LAYERS: usize = 2;
pub const SELECTOR_HEADS: usize = 2;

/// `N` candidate frame features and the frames they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub features: Tensor,
    pub source_frames: Vec<usize>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Frames whose timestamp falls inside `interval`.
pub fn frames_in(video: &VideoView<'_>, interval: &TemporalInterval) -> Vec<usize> {
    video
        .frame_times
        .iter()
        .enumerate()
        .filter(|(_, &t)| interval.contains(t / video.duration_s))
        .map(|(i, _)| i)
        .collect()
}

/// `n` frames from inside the interval: without replacement when enough
/// exist, otherwise with replacement.
pub fn sample_candidates(video: &VideoView<'_>, interval: &TemporalInterval, n: usize, rng: &mut impl Rng) -> Result<CandidateSet> {
    if n == 0 {
        return Err(Error::invalid("candidate count must be positive"));
    }
    let inside = frames_in(video, interval);
    if inside.is_empty() {
        return Err(Error::SkipProposal(format!(
            "video {} interval ({:.4}, {:.4})",
            video.id, interval.start, interval.end
        )));
    }
    let picks: Vec<usize> = if inside.len() >= n {
        sample(rng, inside.len(), n).into_iter().map(|i| inside[i]).collect()
    } else {
        (0..n).map(|_| inside[rng.random_range(0..inside.len())]).collect()
    };
    let mut features = Tensor::zeros(n, video.frame_features.cols());
    for (r, &f) in picks.iter().enumerate() {
        features.row_mut(r).copy_from_slice(video.frame_features.row(f));
    }
    Ok(CandidateSet { features, source_frames: picks })
}

/// The additive term `ξ·ε·‖q‖/‖ε‖`, whose norm is exactly `ξ·‖q‖`.
pub fn perturbation(q: &[f64], xi: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != q.len() {
        return Err(Error::invalid("noise and feature dimensions differ"));
    }
    let qn = l2_norm(q);
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::invalid("cannot perturb a zero or non-finite feature"));
    }
    if !(xi >= 0.0) {
        return Err(Error::invalid(format!("perturbation scale must be nonnegative, got {xi}")));
    }
    if xi == 0.0 {
        return Ok(vec![0.0; q.len()]);
    }
    let en = l2_norm(eps);
    if en == 0.0 {
        return Err(Error::invalid("perturbation direction is zero"));
    }
    Ok(eps.iter().map(|e| xi * e * qn / en).collect())
}

/// Perturbs with the given direction `eps`, then projects to the unit sphere.
pub fn perturb_with(q: &[f64], xi: f64, eps: &[f64]) -> Result<Vec<f64>> {
    let d = perturbation(q, xi, eps)?;
    let moved: Vec<f64> = q.iter().zip(&d).map(|(a, b)| a + b).collect();
    let n = l2_norm(&moved);
    Ok(moved.into_iter().map(|x| x / n).collect())
}

pub fn perturb(q: &[f64], xi: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let eps: Vec<f64> = loop {
        let e: Vec<f64> = (0..q.len()).map(|_| rng.sample(StandardNormal)).collect();
        if l2_norm(&e) > 0.0 {
            break e;
        }
    };
    perturb_with(q, xi, &eps)
}

pub fn perturb_candidates(c: &mut CandidateSet, xi: f64, rng: &mut impl Rng) -> Result<()> {
    for r in 0..c.features.rows() {
        let p = perturb(c.features.row(r), xi, rng)?;
        c.features.row_mut(r).copy_from_slice(&p);
    }
    Ok(())
}

/// Transformer encoder over candidate tokens with a scalar score per token.
#[derive(Clone, Debug)]
pub struct SelectionTransformer {
    layers: Vec<EncoderLayer>,
    score: Linear,
    dim: usize,
}

impl SelectionTransformer {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let layers = (0..SELECTOR_LAYERS)
            .map(|l| EncoderLayer::new(store, &format!("selector.{l}"), dim, SELECTOR_HEADS, 2 * dim, rng))
            .collect::<Result<_>>()?;
        // Scores feed a softmax over candidates, so a bias would be inert.
        let score = Linear::new_unbiased(store, "selector.score", dim, 1, rng);
        Ok(Self { layers, score, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One logit per candidate, as a `1×N` row.
    pub fn scores(&self, g: &mut Graph<'_>, p: &Bound, candidates: NodeId) -> Result<NodeId> {
        if g.value(candidates).cols() != self.dim {
            return Err(Error::invalid(format!(
                "selector expects {}-dimensional candidates, got {}",
                self.dim,
                g.value(candidates).cols()
            )));
        }
        let mut h = candidates;
        for layer in &self.layers {
            h = layer.forward(g, p, h)?;
        }
        let s = self.score.forward(g, p, h)?;
        Ok(g.transpose(s))
    }
}

/// How relaxed weights become selection weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum SelectionMode {
    Soft,
    /// One-hot forward, soft backward.
    #[default]
    Hard,
    /// Soft weights plus a fixed residual; with the residual recorded from a
    /// [`SelectionMode::Hard`] pass this has the same value and the same
    /// gradient, but is smooth in the parameters so finite differences apply.
    HardFrozen(Tensor),
}

pub struct SelectionNodes {
    /// `1×D` unit-norm selected feature.
    pub feature: NodeId,
    /// `1×N` relaxed weights.
    pub soft: NodeId,
    pub index: usize,
    /// `one_hot − soft` of this pass (zero in soft mode).
    pub residual: Tensor,
}

/// Gumbel-softmax over `scores` and the weighted, renormalized candidate.
///
/// `noise` of `None` disables the Gumbel perturbation.
pub fn select_from_scores(
    g: &mut Graph<'_>,
    scores: NodeId,
    candidates: NodeId,
    tau: f64,
    noise: Option<&[f64]>,
    mode: &SelectionMode,
) -> Result<SelectionNodes> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("gumbel temperature must be positive, got {tau}")));
    }
    let n = g.value(scores).cols();
    if g.value(candidates).rows() != n || g.value(scores).rows() != 1 {
        return Err(Error::invalid("scores must be one row with one entry per candidate"));
    }
    let mut logits = scores;
    if let Some(noise) = noise {
        if noise.len() != n {
            return Err(Error::invalid("gumbel noise length does not match candidates"));
        }
        let c = g.constant(Tensor::row_vector(noise));
        logits = g.add(logits, c)?;
    }
    let logits = g.scale(logits, 1.0 / tau);
    let soft = g.softmax_rows(logits);
    let soft_value = g.value(soft).clone();
    let index = argmax(soft_value.row(0));
    let mut one_hot = Tensor::zeros(1, n);
    one_hot.set(0, index, 1.0);
    let (weights, residual) = match mode {
        SelectionMode::Soft => (soft, Tensor::zeros(1, n)),
        SelectionMode::Hard => {
            let mut residual = one_hot;
            for (r, s) in residual.data_mut().iter_mut().zip(soft_value.data()) {
                *r -= s;
            }
            (g.straight_through(soft), residual)
        }
        SelectionMode::HardFrozen(residual) => (g.add_const(soft, residual)?, residual.clone()),
    };
    let mixed = g.matmul(weights, candidates)?;
    let feature = g.l2_normalize_rows(mixed)?;
    Ok(SelectionNodes { feature, soft, index, residual })
}

/// The feature that stands in for a text query during training.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLanguageFeature {
    pub feature: Vec<f64>,
    pub selected_index: usize,
    pub soft_weights: Vec<f64>,
}

pub fn select(
    candidates: &CandidateSet,
    selector: &SelectionTransformer,
    store: &ParamStore,
    tau: f64,
    hard: bool,
    noise: Option<&[f64]>,
) -> Result<PseudoLanguageFeature> {
    let mut g = Graph::new();
    let p = g.bind(store);
    let c = g.constant_ref(&candidates.features);
    let scores = selector.scores(&mut g, &p, c)?;
    let mode = if hard { SelectionMode::Hard } else { SelectionMode::Soft };
    let sel = select_from_scores(&mut g, scores, c, tau, noise, &mode)?;
    Ok(PseudoLanguageFeature {
        feature: g.value(sel.feature).row(0).to_vec(),
        selected_index: sel.index,
        soft_weights: g.value(sel.soft).row(0).to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub n_frames: usize,
    pub xi: f64,
    pub tau: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { n_frames: DEFAULT_N_FRAMES, xi: DEFAULT_XI, tau: 1.0 }
    }
}

/// Everything random about one training sample, drawn up front so the
/// selection can be replayed inside the training graph.
#[derive(Clone, Debug)]
pub struct PseudoPair {
    pub video: usize,
    pub candidates: CandidateSet,
    pub gumbel: Vec<f64>,
    /// Uniform pick used when the selector is replaced by random choice.
    pub random_pick: usize,
    pub target: TemporalInterval,
}

/// Samples and perturbs candidates for `proposal` and draws the selection
/// noise. Fails with a skip error for proposals without frames.
pub fn draw_pair(video_index: usize, video: &VideoView<'_>, proposal: &TemporalProposal, cfg: &PairConfig, rng: &mut impl Rng) -> Result<PseudoPair> {
    let mut candidates = sample_candidates(video, &proposal.interval, cfg.n_frames, rng)?;
    perturb_candidates(&mut candidates, cfg.xi, rng)?;
    let gumbel = gumbel_noise(cfg.n_frames, rng);
    let random_pick = rng.random_range(0..cfg.n_frames);
    Ok(PseudoPair { video: video_index, candidates, gumbel, random_pick, target: proposal.interval })
}

/// One training triple: the pair data plus its hard-selected feature.
pub fn make_training_pair(
    video: &VideoView<'_>,
    proposal: &TemporalProposal,
    selector: &SelectionTransformer,
    store: &ParamStore,
    cfg: &PairConfig,
    rng: &mut impl Rng,
) -> Result<(PseudoPair, PseudoLanguageFeature)> {
    let pair = draw_pair(0, video, proposal, cfg, rng)?;
    let q = select(&pair.candidates, selector, store, cfg.tau, true, Some(&pair.gumbel))?;
    Ok((pair, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
        let mut t = Tensor::zeros(n, d);
        for r in 0..n {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = l2_norm(&v);
            t.row_mut(r).iter_mut().zip(&v).for_each(|(x, y)| *x = y / norm);
        }
        t
    }

    #[test]
    fn perturb_examples() {
        assert_eq!(perturb_with(&[3.0, 4.0], 0.0, &[1.0, 0.0]).unwrap(), vec![0.6, 0.8]);
        let p = perturb_with(&[0.0, 1.0], 0.5, &[1.0, 0.0]).unwrap();
        assert!((p[0] - 0.447213595499958).abs() < 1e-12 && (p[1] - 0.894427190999916).abs() < 1e-12);
        assert!(perturb_with(&[0.0, 0.0], 0.1, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn perturb_keeps_direction_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = [0.3, -1.0, 2.0, 0.5];
        let unit: Vec<f64> = q.iter().map(|x| x / l2_norm(&q)).collect();
        for xi in [0.01, 0.05, 0.1] {
            let mean = (0..10_000)
                .map(|_| crate::tensor::dot(&perturb(&q, xi, &mut rng).unwrap(), &unit))
                .sum::<f64>()
                / 10_000.0;
            assert!(mean >= 1.0 - 2.0 * xi * xi, "xi {xi}: {mean}");
        }
    }

    #[test]
    fn single_candidate_is_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let st = SelectionTransformer::new(&mut store, 4, &mut rng).unwrap();
        let c = CandidateSet { features: unit_rows(1, 4, &mut rng), source_frames: vec![0] };
        let q = select(&c, &st, &store, 1.0, true, Some(&[0.7])).unwrap();
        assert_eq!(q.selected_index, 0);
        for (a, b) in q.feature.iter().zip(c.features.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn injected_logit_wins_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cands = unit_rows(5, 3, &mut rng);
        let mut g = Graph::new();
        let c = g.constant(cands.clone());
        let s = g.constant(Tensor::row_vector(&[0.1, -0.2, 40.0, 0.3, 0.0]));
        let sel = select_from_scores(&mut g, s, c, 1.0, None, &SelectionMode::Hard).unwrap();
        assert_eq!(sel.index, 2);
        for (a, b) in g.value(sel.feature).row(0).iter().zip(cands.row(2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_must_be_positive() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::identity(2));
        let s = g.constant(Tensor::row_vector(&[0.0, 1.0]));
        assert!(select_from_scores(&mut g, s, c, 0.0, None, &SelectionMode::Soft).is_err());
    }

    proptest! {
        #[test]
        fn perturbed_rows_are_unit_and_offset_has_exact_norm(
            q in prop::collection::vec(-5.0f64..5.0, 2..12),
            eps_seed in 0u64..10_000,
            xi in 0.0f64..0.5,
        ) {
            if l2_norm(&q) > 1e-3 {
                let mut rng = ChaCha8Rng::seed_from_u64(eps_seed);
                let eps: Vec<f64> = (0..q.len()).map(|_| rng.sample(StandardNormal)).collect();
                let d = perturbation(&q, xi, &eps).unwrap();
                prop_assert!((l2_norm(&d) - xi * l2_norm(&q)).abs() <= 1e-9 * (1.0 + l2_norm(&q)));
                prop_assert!((l2_norm(&perturb_with(&q, xi, &eps).unwrap()) - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn selection_is_permutation_equivariant(seed in 0u64..500, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let st = SelectionTransformer::new(&mut store, 4, &mut rng).unwrap();
            let feats = unit_rows(n, 4, &mut rng);
            let noise = gumbel_noise(n, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(1 + seed as usize % (n - 1));
            let mut pf = Tensor::zeros(n, 4);
            for (i, &p) in perm.iter().enumerate() {
                pf.row_mut(i).copy_from_slice(feats.row(p));
            }
            let pn: Vec<f64> = perm.iter().map(|&p| noise[p]).collect();
            let a = select(&CandidateSet { features: feats, source_frames: (0..n).collect() }, &st, &store, 1.0, true, Some(&noise)).unwrap();
            let b = select(&CandidateSet { features: pf, source_frames: perm.clone() }, &st, &store, 1.0, true, Some(&pn)).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((b.soft_weights[i] - a.soft_weights[p]).abs() < 1e-9);
            }
            for (x, y) in a.feature.iter().zip(&b.feature) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let total: f64 = a.soft_weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!((l2_norm(&a.feature) - 1.0).abs() < 1e-6);
        }
    }
}
