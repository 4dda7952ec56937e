//! Pseudo ground-truth intervals from video features alone.
//!
//! Segments are clustered with k-means, contiguous runs of one label become
//! base events, and windows of adjacent events are merged into longer
//! proposals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::TemporalInterval;
use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Tensor};

pub const DEFAULT_K: usize = 5;
pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITERS: usize = 100;

/// Pairwise cosine similarity of segment features, `T×T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(Tensor);

impl SimilarityMatrix {
    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }
}

pub fn similarity_matrix(f: &Tensor) -> Result<SimilarityMatrix> {
    if f.rows() == 0 {
        return Err(Error::invalid("similarity matrix of an empty sequence"));
    }
    let norms: Vec<f64> = f.iter_rows().map(l2_norm).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::invalid(format!("feature row {i} has zero or non-finite norm")));
    }
    let t = f.rows();
    let mut r = Tensor::zeros(t, t);
    for i in 0..t {
        r.set(i, i, 1.0);
        for j in i + 1..t {
            let c = (dot(f.row(i), f.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            r.set(i, j, c);
            r.set(j, i, c);
        }
    }
    Ok(SimilarityMatrix(r))
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Tensor,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct_rows(f: &Tensor) -> usize {
    let mut rows: Vec<Vec<u64>> = f.iter_rows().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

fn plus_plus_seeds(f: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
    let n = f.rows();
    let mut centroids = Tensor::zeros(k, f.cols());
    centroids.row_mut(0).copy_from_slice(f.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = f.iter_rows().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            chosen.expect("positive total implies a positive weight")
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(f.row(pick));
        for (i, r) in f.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centroids.row(c)));
        }
    }
    centroids
}

/// Nearest centroid per row; the lowest index wins ties.
fn assign(f: &Tensor, centroids: &Tensor) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = f
        .iter_rows()
        .map(|r| {
            let mut best = (0, f64::INFINITY);
            for (c, cr) in centroids.iter_rows().enumerate() {
                let d = sq_dist(r, cr);
                if d < best.1 {
                    best = (c, d);
                }
            }
            inertia += best.1;
            best.0
        })
        .collect();
    (labels, inertia)
}

/// Cluster means; an empty cluster keeps its previous centroid.
fn update(f: &Tensor, labels: &[usize], centroids: &mut Tensor) {
    let k = centroids.rows();
    let mut sums = Tensor::zeros(k, f.cols());
    let mut counts = vec![0usize; k];
    for (r, &l) in f.iter_rows().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums.row_mut(l).iter_mut().zip(r) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / n;
            }
        }
    }
}

fn lloyd(f: &Tensor, mut centroids: Tensor) -> KMeansResult {
    let (mut labels, mut inertia) = assign(f, &centroids);
    let mut history = vec![inertia];
    for _ in 1..KMEANS_MAX_ITERS {
        update(f, &labels, &mut centroids);
        let (next, next_inertia) = assign(f, &centroids);
        let converged = next == labels;
        labels = next;
        inertia = next_inertia;
        history.push(inertia);
        if converged {
            break;
        }
    }
    KMeansResult { labels, centroids, inertia, inertia_history: history }
}

/// Lloyd's algorithm with k-means++ seeding; the best of
/// [`KMEANS_RESTARTS`] restarts by inertia (earliest on ties).
pub fn kmeans_cluster(f: &Tensor, k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::invalid("k-means needs k ≥ 1"));
    }
    if f.rows() == 0 || !f.is_finite() {
        return Err(Error::invalid("k-means input must be nonempty and finite"));
    }
    let distinct = count_distinct_rows(f);
    if k > distinct {
        return Err(Error::invalid(format!("k = {k} exceeds the {distinct} distinct feature rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(f, plus_plus_seeds(f, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Maximal runs of equal labels as inclusive `(first, last)` spans.
pub fn events_from_labels(labels: &[usize]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            runs.push((start, i - 1));
            start = i;
        }
    }
    runs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalProposal {
    /// Inclusive segment span.
    pub first: usize,
    pub last: usize,
    pub interval: TemporalInterval,
    /// Number of base events in the span.
    pub merged_from: usize,
}

impl TemporalProposal {
    pub fn new(first: usize, last: usize, t: usize, merged_from: usize) -> Self {
        Self { first, last, interval: TemporalInterval::from_span(first, last, t), merged_from }
    }

    pub fn num_segments(&self) -> usize {
        self.last - self.first + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePolicy {
    pub max_merge: usize,
    pub min_len: usize,
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self { max_merge: 2, min_len: 2 }
    }
}

/// Every window of `1..=max_merge` adjacent events as one proposal, shortest
/// windows first. Spans under `min_len` segments are dropped, as is the
/// whole-video span when anything else survives.
pub fn merge_consecutive(events: &[(usize, usize)], policy: MergePolicy, t: usize) -> Vec<TemporalProposal> {
    let mut out: Vec<TemporalProposal> = Vec::new();
    for m in 1..=policy.max_merge.min(events.len()) {
        for w in events.windows(m) {
            let (first, last) = (w[0].0, w[m - 1].1);
            if last - first + 1 < policy.min_len {
                continue;
            }
            if out.iter().any(|p| p.first == first && p.last == last) {
                continue;
            }
            out.push(TemporalProposal::new(first, last, t, m));
        }
    }
    if out.len() > 1 {
        out.retain(|p| !(p.first == 0 && p.last + 1 == t));
    }
    out
}

/// k-means over segment features, label runs, then merging. Falls back to the
/// whole video when every span is filtered out.
pub fn generate_proposals(segment_features: &Tensor, k: usize, policy: MergePolicy, seed: u64) -> Result<Vec<TemporalProposal>> {
    let t = segment_features.rows();
    if t < k {
        return Err(Error::invalid(format!("video has {t} segments, fewer than k = {k}")));
    }
    let km = kmeans_cluster(segment_features, k, seed)?;
    let events = events_from_labels(&km.labels);
    let mut proposals = merge_consecutive(&events, policy, t);
    if proposals.is_empty() {
        proposals.push(TemporalProposal::new(0, t - 1, t, events.len()));
    }
    Ok(proposals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn col(values: &[f64]) -> Tensor {
        Tensor::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let s = 0.5f64.sqrt();
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![s, s], vec![0.0, 3.0], vec![1.0, 0.0]]).unwrap();
        let r = similarity_matrix(&f).unwrap();
        assert!((r.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(r.get(0, 2), 0.0);
        assert_eq!(r.get(0, 3), 1.0);
    }

    #[test]
    fn zero_row_is_named() {
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let err = similarity_matrix(&f).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn kmeans_one_cluster_is_the_mean() {
        let km = kmeans_cluster(&col(&[1.0, 2.0, 6.0]), 1, 0).unwrap();
        assert_eq!(km.labels, vec![0, 0, 0]);
        assert!((km.centroids.get(0, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_t_has_zero_inertia() {
        let km = kmeans_cluster(&col(&[0.0, 1.0, 3.0, 7.0]), 4, 3).unwrap();
        assert_eq!(km.inertia, 0.0);
    }

    #[test]
    fn kmeans_rejects_k_above_distinct_rows() {
        assert!(kmeans_cluster(&col(&[1.0, 1.0, 2.0]), 3, 0).is_err());
        assert!(kmeans_cluster(&col(&[1.0]), 0, 0).is_err());
    }

    #[test]
    fn runs_examples() {
        assert_eq!(events_from_labels(&[0, 0, 1, 1, 0]), vec![(0, 1), (2, 3), (4, 4)]);
        assert_eq!(events_from_labels(&[2; 6]), vec![(0, 5)]);
        assert_eq!(events_from_labels(&[0, 1, 0, 1]), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn merge_three_events() {
        let events = [(0, 1), (2, 4), (5, 7)];
        let p = merge_consecutive(&events, MergePolicy { max_merge: 2, min_len: 1 }, 10);
        let spans: Vec<_> = p.iter().map(|p| (p.first, p.last, p.merged_from)).collect();
        assert_eq!(spans, vec![(0, 1, 1), (2, 4, 1), (5, 7, 1), (0, 4, 2), (2, 7, 2)]);
    }

    #[test]
    fn single_event_survives_even_if_whole_video() {
        let p = merge_consecutive(&[(0, 9)], MergePolicy::default(), 10);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].interval, TemporalInterval { start: 0.0, end: 1.0 });
    }

    #[test]
    fn k_one_gives_whole_video() {
        let f = Tensor::from_rows(&[vec![1.0, 0.2], vec![0.3, 1.0], vec![1.0, 1.0]]).unwrap();
        let p = generate_proposals(&f, 1, MergePolicy::default(), 0).unwrap();
        assert_eq!(p, vec![TemporalProposal::new(0, 2, 3, 1)]);
    }

    proptest! {
        #[test]
        fn similarity_is_scale_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), 1..6),
            scales in prop::collection::vec(0.01f64..100.0, 6),
        ) {
            let f = Tensor::from_rows(&rows).unwrap();
            let mut g = f.clone();
            for (i, s) in scales.iter().take(g.rows()).enumerate() {
                g.row_mut(i).iter_mut().for_each(|x| *x *= s);
            }
            let (a, b) = (similarity_matrix(&f).unwrap(), similarity_matrix(&g).unwrap());
            for i in 0..f.rows() {
                prop_assert!((a.get(i, i) - 1.0).abs() < 1e-6);
                for j in 0..f.rows() {
                    prop_assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-6);
                    prop_assert!((a.get(i, j) - b.get(i, j)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn proposals_are_valid(
            seed in 0u64..1000,
            t in 4usize..24,
            k in 1usize..5,
            min_len in 1usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..t * 3).map(|_| rng.random::<f64>()).collect();
            let f = Tensor::from_vec(t, 3, data).unwrap();
            let policy = MergePolicy { max_merge: 2, min_len };
            let p = generate_proposals(&f, k, policy, seed).unwrap();
            prop_assert!(!p.is_empty());
            let base: Vec<_> = p.iter().filter(|p| p.merged_from == 1).collect();
            for w in base.windows(2) {
                prop_assert!(w[0].last < w[1].first);
            }
            for q in &p {
                prop_assert!(q.interval.start >= 0.0 && q.interval.start < q.interval.end && q.interval.end <= 1.0);
                if p.len() > 1 || q.merged_from == 1 {
                    prop_assert!(q.num_segments() >= min_len.min(t));
                }
            }
        }

        #[test]
        fn inertia_never_increases(seed in 0u64..1000, t in 3usize..30, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..t * 2).map(|_| rng.random::<f64>()).collect();
            let f = Tensor::from_vec(t, 2, data).unwrap();
            let k = k.min(t);
            let mut seeder = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..3 {
                let run = lloyd(&f, plus_plus_seeds(&f, k, &mut seeder));
                for w in run.inertia_history.windows(2) {
                    prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{:?}", run.inertia_history);
                }
            }
        }
    }
}
