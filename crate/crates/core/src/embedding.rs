//! Joint vision-language embedding space: datasets, a seeded synthetic
//! generator with controllable alignment, and the query-free training view.
//!
//! The simulator draws one latent concept per event and renders it through
//! three linear maps into (a) segment features, (b) frame features and (c)
//! text features. The text map is the image map plus `align_noise_sigma`
//! times a fixed random perturbation, so alignment degrades smoothly.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::tensor::{cosine, l2_norm, Tensor};

/// Normalized `(start, end)` with `0 ≤ start ≤ end ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalInterval {
    pub start: f64,
    pub end: f64,
}

impl TemporalInterval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end > 1.0 || start > end {
            return Err(Error::invalid(format!("invalid temporal interval ({start}, {end})")));
        }
        Ok(Self { start, end })
    }

    /// Interval covered by segments `first..=last` of a `t`-segment video.
    pub fn from_span(first: usize, last: usize, t: usize) -> Self {
        Self { start: first as f64 / t as f64, end: (last + 1) as f64 / t as f64 }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, x: f64) -> bool {
        self.start <= x && x <= self.end
    }
}

/// Ground-truth event of a synthetic (or annotated) video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenEvent {
    /// Inclusive segment span.
    pub first: usize,
    pub last: usize,
    pub concept: usize,
}

impl HiddenEvent {
    pub fn interval(&self, t: usize) -> TemporalInterval {
        TemporalInterval::from_span(self.first, self.last, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub duration_s: f64,
    /// `T×D_v` segment features.
    pub segment_features: Tensor,
    /// `M×D_q` per-frame image embeddings.
    pub frame_features: Tensor,
    pub frame_times: Vec<f64>,
    pub hidden_events: Option<Vec<HiddenEvent>>,
}

impl VideoRecord {
    pub fn num_segments(&self) -> usize {
        self.segment_features.rows()
    }

    /// The annotation-free part of the record.
    pub fn view(&self) -> VideoView<'_> {
        VideoView {
            id: &self.id,
            duration_s: self.duration_s,
            segment_features: &self.segment_features,
            frame_features: &self.frame_features,
            frame_times: &self.frame_times,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::load(format!("video {}", self.id), reason));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return fail(format!("duration {} is not positive", self.duration_s));
        }
        if self.segment_features.rows() == 0 {
            return fail("no segments".into());
        }
        if !self.segment_features.is_finite() || !self.frame_features.is_finite() {
            return fail("non-finite feature values".into());
        }
        if self.frame_times.len() != self.frame_features.rows() {
            return fail(format!(
                "{} frame times for {} frames",
                self.frame_times.len(),
                self.frame_features.rows()
            ));
        }
        if self.frame_times.windows(2).any(|w| w[1] < w[0]) {
            return fail("frame times are not nondecreasing".into());
        }
        if self.frame_times.iter().any(|&t| !(0.0..=self.duration_s).contains(&t)) {
            return fail("frame time outside [0, duration]".into());
        }
        if let Some(events) = &self.hidden_events {
            let t = self.num_segments();
            if events.iter().any(|e| e.first > e.last || e.last >= t) {
                return fail("event span outside the segment range".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub id: String,
    pub video_id: String,
    /// Text embedding, unit norm.
    pub feature: Vec<f64>,
    pub gt_interval: TemporalInterval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Imported,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoRecord>,
    pub queries: Vec<QueryRecord>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.id == id)
    }

    pub fn video_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.segment_features.cols())
    }

    pub fn query_dim(&self) -> Option<usize> {
        self.videos
            .first()
            .map(|v| v.frame_features.cols())
            .or_else(|| self.queries.first().map(|q| q.feature.len()))
    }

    pub fn validate(&self) -> Result<()> {
        let dv = self.video_dim();
        let dq = self.query_dim();
        for v in &self.videos {
            v.validate()?;
            if Some(v.segment_features.cols()) != dv || (v.frame_features.rows() > 0 && Some(v.frame_features.cols()) != dq) {
                return Err(Error::load(format!("video {}", v.id), "feature width differs from other videos"));
            }
        }
        let mut missing = Vec::new();
        for q in &self.queries {
            if self.video_index(&q.video_id).is_none() {
                missing.push(q.id.clone());
            }
            if q.feature.iter().any(|x| !x.is_finite()) || Some(q.feature.len()) != dq {
                return Err(Error::load(format!("query {}", q.id), "feature is non-finite or has the wrong width"));
            }
            TemporalInterval::new(q.gt_interval.start, q.gt_interval.end)
                .map_err(|e| Error::load(format!("query {}", q.id), e.to_string()))?;
        }
        if !missing.is_empty() {
            return Err(Error::load("queries", format!("reference missing videos: {}", missing.join(", "))));
        }
        Ok(())
    }

    /// First `n_first` videos and their queries, then the rest.
    pub fn split_at(&self, n_first: usize) -> (Dataset, Dataset) {
        let n = n_first.min(self.videos.len());
        let (a, b) = self.videos.split_at(n);
        let part = |videos: &[VideoRecord]| {
            let ids: std::collections::HashSet<&str> = videos.iter().map(|v| v.id.as_str()).collect();
            Dataset {
                videos: videos.to_vec(),
                queries: self.queries.iter().filter(|q| ids.contains(q.video_id.as_str())).cloned().collect(),
                provenance: self.provenance,
            }
        };
        (part(a), part(b))
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView { dataset: self, restricted: AtomicUsize::new(0) }
    }
}

/// Video content visible to training: features and timing only.
#[derive(Clone, Copy, Debug)]
pub struct VideoView<'a> {
    pub id: &'a str,
    pub duration_s: f64,
    pub segment_features: &'a Tensor,
    pub frame_features: &'a Tensor,
    pub frame_times: &'a [f64],
}

impl VideoView<'_> {
    pub fn num_segments(&self) -> usize {
        self.segment_features.rows()
    }
}

/// Accessor that hides queries and ground-truth events from training.
///
/// The only ways to reach annotations are [`TrainingView::queries`] and
/// [`TrainingView::ground_truth_events`]; both are counted so tests can
/// assert that language-free training never used them.
pub struct TrainingView<'a> {
    dataset: &'a Dataset,
    restricted: AtomicUsize,
}

impl<'a> TrainingView<'a> {
    pub fn len(&self) -> usize {
        self.dataset.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.videos.is_empty()
    }

    pub fn video(&self, i: usize) -> VideoView<'a> {
        self.dataset.videos[i].view()
    }

    pub fn videos(&self) -> impl Iterator<Item = VideoView<'a>> + '_ {
        (0..self.len()).map(|i| self.video(i))
    }

    pub fn queries(&self) -> &'a [QueryRecord] {
        self.restricted.fetch_add(1, Ordering::SeqCst);
        &self.dataset.queries
    }

    pub fn ground_truth_events(&self, i: usize) -> Option<&'a [HiddenEvent]> {
        self.restricted.fetch_add(1, Ordering::SeqCst);
        self.dataset.videos[i].hidden_events.as_deref()
    }

    /// Number of query or ground-truth reads so far.
    pub fn restricted_accesses(&self) -> usize {
        self.restricted.load(Ordering::SeqCst)
    }

    /// Hash of everything training can see.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.videos() {
            h.update(v.id.as_bytes());
            h.update(v.duration_s.to_bits().to_le_bytes());
            for t in [v.segment_features, v.frame_features] {
                h.update((t.rows() as u64).to_le_bytes());
                h.update((t.cols() as u64).to_le_bytes());
                t.data().iter().for_each(|x| h.update(x.to_bits().to_le_bytes()));
            }
            v.frame_times.iter().for_each(|x| h.update(x.to_bits().to_le_bytes()));
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMap {
    /// Image map plus `align_noise_sigma`·Δ.
    #[default]
    Perturbed,
    /// A map whose range is orthogonal to the image map's (no alignment).
    Orthogonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub latent_dim: usize,
    pub video_dim: usize,
    pub query_dim: usize,
    pub align_noise_sigma: f64,
    pub obs_noise_sigma: f64,
    /// Probability that a frame shows an unrelated concept instead of its event.
    #[serde(default)]
    pub clutter_fraction: f64,
    #[serde(default)]
    pub text_map: TextMap,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            video_dim: 32,
            query_dim: 32,
            align_noise_sigma: 0.1,
            obs_noise_sigma: 0.05,
            clutter_fraction: 0.3,
            text_map: TextMap::Perturbed,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 || self.video_dim < 2 || self.query_dim < 2 {
            return Err(Error::invalid("embedding dimensions must be at least 2"));
        }
        if self.latent_dim > self.video_dim || self.latent_dim > self.query_dim {
            return Err(Error::invalid("latent dimension exceeds a feature dimension"));
        }
        if self.text_map == TextMap::Orthogonal && 2 * self.latent_dim > self.query_dim {
            return Err(Error::invalid("orthogonal text map needs query_dim ≥ 2·latent_dim"));
        }
        if !(self.align_noise_sigma >= 0.0 && self.obs_noise_sigma >= 0.0) {
            return Err(Error::invalid("noise scales must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return Err(Error::invalid("clutter fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthShape {
    pub n_videos: usize,
    pub segments_per_video: usize,
    pub events_per_video: usize,
    pub frames_per_segment: usize,
    /// Shortest event, in segments.
    pub min_event_len: usize,
}

impl Default for SynthShape {
    fn default() -> Self {
        Self { n_videos: 200, segments_per_video: 32, events_per_video: 5, frames_per_segment: 2, min_event_len: 2 }
    }
}

/// The three fixed linear maps of one synthetic space (`dim×latent`).
struct Maps {
    video: Tensor,
    image: Tensor,
    text: Tensor,
}

const STREAM_MAPS: u64 = 0;
const STREAM_VIDEO: u64 = 1 << 20;
const STREAM_QUERY: u64 = 2 << 20;
const MAX_CONCEPT_COSINE: f64 = 0.5;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Gram–Schmidt on the columns of a Gaussian `rows×cols` matrix.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let mut m = gaussian(rows, cols, 1.0, rng);
    for c in 0..cols {
        for prev in 0..c {
            let d: f64 = (0..rows).map(|r| m.get(r, c) * m.get(r, prev)).sum();
            for r in 0..rows {
                let v = m.get(r, c) - d * m.get(r, prev);
                m.set(r, c, v);
            }
        }
        let n = (0..rows).map(|r| m.get(r, c).powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            let v = m.get(r, c) / n;
            m.set(r, c, v);
        }
    }
    m
}

fn draw_maps(cfg: &AlignmentConfig) -> Maps {
    let mut rng = rng_for(cfg.seed, STREAM_MAPS);
    let video = orthonormal_columns(cfg.video_dim, cfg.latent_dim, &mut rng);
    // Image and orthogonal-text maps come from one basis so their ranges are
    // orthogonal; both are always drawn so the stream does not depend on cfg.
    let basis_cols = if cfg.query_dim >= 2 * cfg.latent_dim { 2 * cfg.latent_dim } else { cfg.latent_dim };
    let joint = orthonormal_columns(cfg.query_dim, basis_cols, &mut rng);
    let take = |offset: usize| {
        let mut t = Tensor::zeros(cfg.query_dim, cfg.latent_dim);
        for r in 0..cfg.query_dim {
            for c in 0..cfg.latent_dim {
                t.set(r, c, joint.get(r, (offset + c) % joint.cols()));
            }
        }
        t
    };
    let image = take(0);
    let delta = gaussian(cfg.query_dim, cfg.latent_dim, 1.0 / (cfg.query_dim as f64).sqrt(), &mut rng);
    let text = match cfg.text_map {
        TextMap::Perturbed => {
            let mut t = image.clone();
            for (a, d) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += cfg.align_noise_sigma * d;
            }
            t
        }
        TextMap::Orthogonal => take(cfg.latent_dim),
    };
    Maps { video, image, text }
}

fn apply_map(map: &Tensor, z: &[f64]) -> Vec<f64> {
    (0..map.rows()).map(|r| crate::tensor::dot(map.row(r), z)).collect()
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = l2_norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn add_noise(v: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    if sigma > 0.0 {
        for x in v {
            *x += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Segment lengths summing to `t`, each at least `min_len`, with the slack
/// split by a flat Dirichlet draw.
fn event_lengths(t: usize, events: usize, min_len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let slack = t - events * min_len;
    let w: Vec<f64> = (0..events).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = w.iter().sum();
    let raw: Vec<f64> = w.iter().map(|x| x / total * slack as f64).collect();
    let mut lens: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = slack - lens.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..events).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        lens[i] += 1;
        rest -= 1;
    }
    lens.into_iter().map(|l| l + min_len).collect()
}

fn generate_video(cfg: &AlignmentConfig, shape: &SynthShape, maps: &Maps, index: usize) -> (VideoRecord, Vec<Vec<f64>>) {
    let mut rng = rng_for(cfg.seed, STREAM_VIDEO + index as u64);
    let t = shape.segments_per_video;
    let duration_s = rng.random_range(20.0..60.0);
    let lens = event_lengths(t, shape.events_per_video, shape.min_event_len, &mut rng);
    let mut concepts: Vec<Vec<f64>> = Vec::with_capacity(lens.len());
    while concepts.len() < lens.len() {
        // Rejection keeps events of one video well separated; bounded so tiny
        // latent spaces still terminate.
        let mut z = unit_vector(cfg.latent_dim, &mut rng);
        for _ in 0..64 {
            if concepts.iter().all(|c| cosine(c, &z) <= MAX_CONCEPT_COSINE) {
                break;
            }
            z = unit_vector(cfg.latent_dim, &mut rng);
        }
        concepts.push(z);
    }

    let mut seg = Tensor::zeros(t, cfg.video_dim);
    let fps = shape.frames_per_segment;
    let mut frames = Tensor::zeros(t * fps, cfg.query_dim);
    let mut frame_times = Vec::with_capacity(t * fps);
    let mut events = Vec::with_capacity(lens.len());
    let mut first = 0;
    for (e, (&len, z)) in lens.iter().zip(&concepts).enumerate() {
        let vz = apply_map(&maps.video, z);
        let iz = apply_map(&maps.image, z);
        for s in first..first + len {
            let mut f = vz.clone();
            add_noise(&mut f, cfg.obs_noise_sigma, &mut rng);
            seg.row_mut(s).copy_from_slice(&f);
            for j in 0..fps {
                let clutter = rng.random::<f64>() < cfg.clutter_fraction;
                let mut q = if clutter { apply_map(&maps.image, &unit_vector(cfg.latent_dim, &mut rng)) } else { iz.clone() };
                add_noise(&mut q, cfg.obs_noise_sigma, &mut rng);
                frames.row_mut(s * fps + j).copy_from_slice(&q);
                frame_times.push(duration_s * (s as f64 + (j as f64 + 0.5) / fps as f64) / t as f64);
            }
        }
        events.push(HiddenEvent { first, last: first + len - 1, concept: index * shape.events_per_video + e });
        first += len;
    }
    let video = VideoRecord {
        id: format!("v{index:05}"),
        duration_s,
        segment_features: seg,
        frame_features: frames,
        frame_times,
        hidden_events: Some(events),
    };
    (video, concepts)
}

fn generate_queries(cfg: &AlignmentConfig, maps: &Maps, index: usize, video: &VideoRecord, concepts: &[Vec<f64>]) -> Vec<QueryRecord> {
    // Separate stream: the noise drawn here is identical for every alignment level.
    let mut rng = rng_for(cfg.seed, STREAM_QUERY + index as u64);
    let t = video.num_segments();
    let events = video.hidden_events.as_deref().unwrap_or_default();
    events
        .iter()
        .zip(concepts)
        .enumerate()
        .map(|(e, (ev, z))| {
            let mut q = apply_map(&maps.text, z);
            add_noise(&mut q, cfg.obs_noise_sigma, &mut rng);
            let n = l2_norm(&q);
            QueryRecord {
                id: format!("{}_q{e}", video.id),
                video_id: video.id.clone(),
                feature: q.into_iter().map(|x| x / n).collect(),
                gt_interval: ev.interval(t),
            }
        })
        .collect()
}

/// Seeded synthetic dataset; every video gets its own RNG stream.
pub fn generate_synthetic_dataset(cfg: &AlignmentConfig, shape: &SynthShape) -> Result<Dataset> {
    generate_synthetic_dataset_with(cfg, shape, Parallelism::default())
}

pub fn generate_synthetic_dataset_with(cfg: &AlignmentConfig, shape: &SynthShape, mode: Parallelism) -> Result<Dataset> {
    cfg.validate()?;
    if shape.n_videos == 0 || shape.segments_per_video == 0 || shape.events_per_video == 0 || shape.frames_per_segment == 0 {
        return Err(Error::invalid("synthetic dataset counts must be positive"));
    }
    if shape.events_per_video > shape.segments_per_video {
        return Err(Error::invalid("more events than segments per video"));
    }
    if shape.events_per_video * shape.min_event_len.max(1) > shape.segments_per_video {
        return Err(Error::invalid("events of minimum length do not fit into the video"));
    }
    let maps = draw_maps(cfg);
    let parts = par::map_range(mode, shape.n_videos, |i| {
        let (video, concepts) = generate_video(cfg, shape, &maps, i);
        let queries = generate_queries(cfg, &maps, i, &video, &concepts);
        (video, queries)
    });
    let mut videos = Vec::with_capacity(parts.len());
    let mut queries = Vec::new();
    for (v, q) in parts {
        videos.push(v);
        queries.extend(q);
    }
    Ok(Dataset { videos, queries, provenance: Provenance::Synthetic })
}

/// Mean cosine between each query and the mean frame feature of its event.
pub fn alignment_score(d: &Dataset) -> Result<f64> {
    if d.queries.is_empty() {
        return Err(Error::invalid("alignment score needs queries"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for q in &d.queries {
        let v = d
            .video_index(&q.video_id)
            .map(|i| &d.videos[i])
            .ok_or_else(|| Error::invalid(format!("query {} references unknown video", q.id)))?;
        let mut mean = vec![0.0; v.frame_features.cols()];
        let mut n = 0;
        for (f, &t) in v.frame_features.iter_rows().zip(&v.frame_times) {
            if q.gt_interval.contains(t / v.duration_s) {
                mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        total += cosine(&q.feature, &mean);
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("no query interval contains frames"));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape(n: usize) -> SynthShape {
        SynthShape { n_videos: n, segments_per_video: 16, events_per_video: 4, frames_per_segment: 2, min_event_len: 2 }
    }

    #[test]
    fn perfect_alignment_gives_unit_cosine() {
        let cfg = AlignmentConfig { align_noise_sigma: 0.0, obs_noise_sigma: 0.0, clutter_fraction: 0.0, ..Default::default() };
        let d = generate_synthetic_dataset(&cfg, &small_shape(5)).unwrap();
        for q in &d.queries {
            let v = &d.videos[d.video_index(&q.video_id).unwrap()];
            for (f, &t) in v.frame_features.iter_rows().zip(&v.frame_times) {
                if q.gt_interval.contains(t / v.duration_s) {
                    assert!((cosine(f, &q.feature) - 1.0).abs() < 1e-9);
                }
            }
        }
        assert!((alignment_score(&d).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn events_tile_video_with_min_length() {
        let d = generate_synthetic_dataset(&AlignmentConfig::default(), &small_shape(50)).unwrap();
        for v in &d.videos {
            let ev = v.hidden_events.as_ref().unwrap();
            assert_eq!(ev.len(), 4);
            assert_eq!(ev[0].first, 0);
            assert_eq!(ev.last().unwrap().last, 15);
            for w in ev.windows(2) {
                assert_eq!(w[1].first, w[0].last + 1);
            }
            assert!(ev.iter().all(|e| e.last + 1 - e.first >= 2));
            v.validate().unwrap();
        }
        assert_eq!(d.queries.len(), 200);
        assert!(d.queries.iter().all(|q| (l2_norm(&q.feature) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let cfg = AlignmentConfig { seed: 9, ..Default::default() };
        let a = generate_synthetic_dataset_with(&cfg, &small_shape(8), Parallelism::Sequential).unwrap();
        let b = generate_synthetic_dataset_with(&cfg, &small_shape(8), Parallelism::Rayon).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_view_is_independent_of_alignment_noise() {
        let shape = small_shape(6);
        let a = generate_synthetic_dataset(&AlignmentConfig { align_noise_sigma: 0.0, ..Default::default() }, &shape).unwrap();
        let b = generate_synthetic_dataset(&AlignmentConfig { align_noise_sigma: 2.0, ..Default::default() }, &shape).unwrap();
        assert_eq!(a.training_view().fingerprint(), b.training_view().fingerprint());
        assert_ne!(a.queries, b.queries);
    }

    #[test]
    fn invalid_counts_rejected() {
        let cfg = AlignmentConfig::default();
        let mut shape = small_shape(2);
        shape.events_per_video = 17;
        assert!(generate_synthetic_dataset(&cfg, &shape).is_err());
        shape.events_per_video = 9; // 9·2 > 16
        assert!(generate_synthetic_dataset(&cfg, &shape).is_err());
        shape = small_shape(0);
        assert!(generate_synthetic_dataset(&cfg, &shape).is_err());
        let bad = AlignmentConfig { align_noise_sigma: -1.0, ..Default::default() };
        assert!(generate_synthetic_dataset(&bad, &small_shape(1)).is_err());
    }

    #[test]
    fn view_counts_restricted_reads() {
        let d = generate_synthetic_dataset(&AlignmentConfig::default(), &small_shape(2)).unwrap();
        let view = d.training_view();
        let _ = view.video(0);
        assert_eq!(view.restricted_accesses(), 0);
        let _ = view.queries();
        let _ = view.ground_truth_events(1);
        assert_eq!(view.restricted_accesses(), 2);
    }

    #[test]
    fn interval_validation() {
        assert!(TemporalInterval::new(0.2, 0.1).is_err());
        assert!(TemporalInterval::new(-0.1, 0.5).is_err());
        assert!(TemporalInterval::new(0.0, 1.0 + 1e-9).is_err());
        assert!(TemporalInterval::new(0.3, 0.3).is_ok());
    }
}
