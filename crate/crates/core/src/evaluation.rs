//! Temporal IoU metrics, evaluation over a query split, and the ablation
//! harness that trains and scores model variants on synthetic benchmarks.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{generate_synthetic_dataset, AlignmentConfig, Dataset, SynthShape, TemporalInterval, VideoRecord};
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::training::{train_with, SelectionStrategy, TrainConfig, TrainMode, TrainedModel};

pub const THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

pub fn tiou(pred: &TemporalInterval, gt: &TemporalInterval) -> Result<f64> {
    for iv in [pred, gt] {
        if !(iv.start <= iv.end) || !iv.start.is_finite() || !iv.end.is_finite() {
            return Err(Error::invalid(format!("invalid interval ({}, {})", iv.start, iv.end)));
        }
    }
    let inter = (pred.end.min(gt.end) - pred.start.max(gt.start)).max(0.0);
    let union = pred.end.max(gt.end) - pred.start.min(gt.start);
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// Percentage of tIoUs strictly above `threshold`.
pub fn recall_at(tious: &[f64], threshold: f64) -> Result<f64> {
    if tious.is_empty() {
        return Err(Error::invalid("recall of an empty prediction set"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(100.0 * tious.iter().filter(|&&x| x > threshold).count() as f64 / tious.len() as f64)
}

pub fn mean_iou(tious: &[f64]) -> Result<f64> {
    if tious.is_empty() {
        return Err(Error::invalid("mean IoU of an empty prediction set"));
    }
    Ok(100.0 * tious.iter().sum::<f64>() / tious.len() as f64)
}

fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Threshold (formatted `0.3`, …) to percentage.
    pub recall_at: BTreeMap<String, f64>,
    pub miou: f64,
    pub n_queries: usize,
}

impl EvalResult {
    pub fn from_tious(tious: &[f64]) -> Result<Self> {
        let recall_at = THRESHOLDS.iter().map(|&t| Ok((threshold_key(t), recall_at(tious, t)?))).collect::<Result<_>>()?;
        Ok(Self { recall_at, miou: mean_iou(tious)?, n_queries: tious.len() })
    }

    pub fn recall(&self, threshold: f64) -> Option<f64> {
        self.recall_at.get(&threshold_key(threshold)).copied()
    }

    pub fn table(&self) -> String {
        let mut s = String::from("R@0.3    R@0.5    R@0.7    mIoU     queries\n");
        for t in THRESHOLDS {
            let _ = write!(s, "{:<9.2}", self.recall(t).unwrap_or(f64::NAN));
        }
        let _ = writeln!(s, "{:<9.2}{}", self.miou, self.n_queries);
        s
    }
}

/// Anything that maps a video and a text feature to an interval.
pub trait IntervalPredictor: Sync {
    fn predict(&self, video: &VideoRecord, query: &[f64]) -> Result<TemporalInterval>;
}

impl IntervalPredictor for TrainedModel {
    fn predict(&self, video: &VideoRecord, query: &[f64]) -> Result<TemporalInterval> {
        Ok(self.grounding.forward(&self.grounding_params, &video.segment_features, query)?.prediction)
    }
}

/// Per-query tIoU in query order.
pub fn query_tious(predictor: &dyn IntervalPredictor, data: &Dataset, mode: Parallelism) -> Result<Vec<f64>> {
    if data.queries.is_empty() {
        return Err(Error::Evaluation("the split has no queries".into()));
    }
    let missing: Vec<&str> = data.queries.iter().filter(|q| data.video_index(&q.video_id).is_none()).map(|q| q.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!("queries reference missing videos: {}", missing.join(", "))));
    }
    par::map(mode, &data.queries, |q| {
        let v = &data.videos[data.video_index(&q.video_id).expect("checked above")];
        let pred = predictor.predict(v, &q.feature)?;
        if !(0.0..=1.0).contains(&pred.start) || !(0.0..=1.0).contains(&pred.end) {
            return Err(Error::ContractViolation(format!("prediction for {} left [0, 1]", q.id)));
        }
        tiou(&pred, &q.gt_interval)
    })
    .into_iter()
    .collect()
}

pub fn evaluate(predictor: &dyn IntervalPredictor, data: &Dataset) -> Result<EvalResult> {
    evaluate_with(predictor, data, Parallelism::default())
}

pub fn evaluate_with(predictor: &dyn IntervalPredictor, data: &Dataset, mode: Parallelism) -> Result<EvalResult> {
    EvalResult::from_tious(&query_tious(predictor, data, mode)?)
}

/// mIoU (percent) of uniformly random ordered intervals against the split's
/// ground truth, by Monte Carlo.
pub fn random_baseline(data: &Dataset, draws: usize, seed: u64) -> Result<f64> {
    if data.queries.is_empty() || draws == 0 {
        return Err(Error::invalid("random baseline needs queries and at least one draw"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tious = (0..draws)
        .map(|_| {
            let q = &data.queries[rng.random_range(0..data.queries.len())];
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            tiou(&TemporalInterval { start: a.min(b), end: a.max(b) }, &q.gt_interval)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_iou(&tious)
}

/// A synthetic train/test benchmark; seed `s` shifts the data seed by `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub alignment: AlignmentConfig,
    pub shape: SynthShape,
    /// Held-out videos whose queries are evaluated.
    pub n_test: usize,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self { alignment: AlignmentConfig::default(), shape: SynthShape::default(), n_test: 100 }
    }
}

impl Benchmark {
    /// `(train, test)` for run seed `seed`.
    pub fn datasets(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let cfg = AlignmentConfig { seed: self.alignment.seed.wrapping_add(seed), ..self.alignment.clone() };
        let shape = SynthShape { n_videos: self.shape.n_videos + self.n_test, ..self.shape.clone() };
        let all = generate_synthetic_dataset(&cfg, &shape)?;
        Ok(all.split_at(self.shape.n_videos))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    /// Regression only, attention only, both.
    Losses,
    /// Random pick versus the selection transformer.
    Selection,
    /// Number of sampled frames `N`.
    NFrames,
    /// Ground-truth intervals versus clustered proposals.
    UpperBound,
    /// Text-map misalignment of the evaluation queries.
    Alignment,
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "losses" => Ok(Self::Losses),
            "selection" => Ok(Self::Selection),
            "n_frames" => Ok(Self::NFrames),
            "upper_bound" => Ok(Self::UpperBound),
            "alignment" => Ok(Self::Alignment),
            _ => Err(Error::invalid(format!("unknown ablation suite {s:?}"))),
        }
    }
}

pub const N_FRAMES_SWEEP: [usize; 6] = [1, 2, 4, 8, 9, 16];
pub const ALIGNMENT_SWEEP: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
/// Slack in mIoU percentage points for the upper-bound comparison.
pub const UPPER_BOUND_SLACK: f64 = 2.0;

/// One variant: a name, a training config and the evaluation-side alignment.
#[derive(Clone, Debug)]
struct Variant {
    name: String,
    cfg: TrainConfig,
    align_noise: f64,
}

fn variants(suite: AblationSuite, base: &TrainConfig, bench: &Benchmark) -> Vec<Variant> {
    let v = |name: &str, cfg: TrainConfig| Variant { name: name.into(), cfg, align_noise: bench.alignment.align_noise_sigma };
    match suite {
        AblationSuite::Losses => vec![
            v("reg_only", TrainConfig { use_reg_loss: true, use_att_loss: false, ..base.clone() }),
            v("att_only", TrainConfig { use_reg_loss: false, use_att_loss: true, ..base.clone() }),
            v("both", TrainConfig { use_reg_loss: true, use_att_loss: true, ..base.clone() }),
        ],
        AblationSuite::Selection => vec![
            v("random", TrainConfig { selection: SelectionStrategy::Random, ..base.clone() }),
            v("transformer", TrainConfig { selection: SelectionStrategy::Transformer, ..base.clone() }),
        ],
        AblationSuite::NFrames => {
            N_FRAMES_SWEEP.iter().map(|&n| v(&format!("n={n}"), TrainConfig { n_frames: n, ..base.clone() })).collect()
        }
        AblationSuite::UpperBound => vec![
            v("language_free", TrainConfig { mode: TrainMode::LanguageFree, ..base.clone() }),
            v("upper_bound", TrainConfig { mode: TrainMode::UpperBound, ..base.clone() }),
        ],
        AblationSuite::Alignment => ALIGNMENT_SWEEP
            .iter()
            .map(|&a| Variant { name: format!("align={a}"), cfg: base.clone(), align_noise: a })
            .collect(),
    }
}

/// Resets the field a suite varies, so every variant must hash like the base.
fn reset_varied(suite: AblationSuite, cfg: &TrainConfig, base: &TrainConfig) -> TrainConfig {
    let mut c = cfg.clone();
    match suite {
        AblationSuite::Losses => {
            c.use_reg_loss = base.use_reg_loss;
            c.use_att_loss = base.use_att_loss;
        }
        AblationSuite::Selection => c.selection = base.selection,
        AblationSuite::NFrames => c.n_frames = base.n_frames,
        AblationSuite::UpperBound => c.mode = base.mode,
        AblationSuite::Alignment => {}
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub config_hash: String,
    pub align_noise: f64,
    pub seeds: Vec<u64>,
    pub results: Vec<EvalResult>,
    pub mean_miou: f64,
    pub sd_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub description: String,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: AblationSuite,
    pub base_config_hash: String,
    /// Every variant equals the base config apart from the varied field.
    pub configs_consistent: bool,
    pub variants: Vec<VariantResult>,
    pub orderings: Vec<OrderingCheck>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn all_orderings_hold(&self) -> bool {
        self.orderings.iter().all(|o| o.holds)
    }

    pub fn table(&self) -> String {
        let mut s = format!("suite {:?}\n{:<16}{:>10}{:>9}{:>9}{:>9}{:>9}\n", self.suite, "variant", "mIoU", "sd", "R@0.3", "R@0.5", "R@0.7");
        for v in &self.variants {
            let mean_r = |t: f64| v.results.iter().filter_map(|r| r.recall(t)).sum::<f64>() / v.results.len() as f64;
            let _ = writeln!(
                s,
                "{:<16}{:>10.2}{:>9.2}{:>9.2}{:>9.2}{:>9.2}",
                v.name,
                v.mean_miou,
                v.sd_miou,
                mean_r(0.3),
                mean_r(0.5),
                mean_r(0.7)
            );
        }
        for o in &self.orderings {
            let _ = writeln!(s, "[{}] {}", if o.holds { "ok" } else { "FAILED" }, o.description);
        }
        s
    }

    /// One row per (variant, seed).
    pub fn csv(&self) -> String {
        let mut s = String::from("suite,variant,seed,r_at_0_3,r_at_0_5,r_at_0_7,miou\n");
        for v in &self.variants {
            for (seed, r) in v.seeds.iter().zip(&v.results) {
                let _ = writeln!(
                    s,
                    "{:?},{},{},{},{},{},{}",
                    self.suite,
                    v.name,
                    seed,
                    r.recall(0.3).unwrap_or(f64::NAN),
                    r.recall(0.5).unwrap_or(f64::NAN),
                    r.recall(0.7).unwrap_or(f64::NAN),
                    r.miou
                );
            }
        }
        s
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Trains and evaluates variants, reusing a trained model whenever the
/// training config and the training data are identical.
pub struct Ablator {
    pub bench: Benchmark,
    pub mode: Parallelism,
    models: HashMap<(String, String), TrainedModel>,
    trainings: usize,
}

impl Ablator {
    pub fn new(bench: Benchmark, mode: Parallelism) -> Self {
        Self { bench, mode, models: HashMap::new(), trainings: 0 }
    }

    /// Number of models actually trained so far.
    pub fn trainings(&self) -> usize {
        self.trainings
    }

    fn bench_with_alignment(&self, align_noise: f64) -> Benchmark {
        let mut b = self.bench.clone();
        b.alignment.align_noise_sigma = align_noise;
        b
    }

    /// Model for `cfg` trained on the run-`seed` training split.
    pub fn model(&mut self, cfg: &TrainConfig, seed: u64) -> Result<&TrainedModel> {
        self.model_on(&self.bench.clone(), cfg, seed)
    }

    fn model_on(&mut self, bench: &Benchmark, cfg: &TrainConfig, seed: u64) -> Result<&TrainedModel> {
        let (train, _) = bench.datasets(seed)?;
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let key = (cfg.hash(), train.training_view().fingerprint());
        if !self.models.contains_key(&key) {
            let out = train_with(&train.training_view(), &cfg, self.mode)?;
            self.trainings += 1;
            self.models.insert(key.clone(), out.model);
        }
        Ok(&self.models[&key])
    }

    /// Held-out evaluation of `cfg` at run `seed` with query alignment `align_noise`.
    pub fn run(&mut self, cfg: &TrainConfig, seed: u64, align_noise: f64) -> Result<EvalResult> {
        let bench = self.bench_with_alignment(align_noise);
        let (_, test) = bench.datasets(seed)?;
        let mode = self.mode;
        let model = self.model_on(&bench, cfg, seed)?;
        evaluate_with(model, &test, mode)
    }

    pub fn run_suite(&mut self, suite: AblationSuite, base: &TrainConfig, seeds: &[u64]) -> Result<AblationReport> {
        if seeds.len() < 3 {
            return Err(Error::invalid("ablations need at least three seeds"));
        }
        let vs = variants(suite, base, &self.bench);
        let configs_consistent = vs.iter().all(|v| reset_varied(suite, &v.cfg, base).hash() == base.hash());
        let mut out = Vec::with_capacity(vs.len());
        for v in &vs {
            let results = seeds.iter().map(|&s| self.run(&v.cfg, s, v.align_noise)).collect::<Result<Vec<_>>>()?;
            let (mean_miou, sd_miou) = mean_sd(&results.iter().map(|r| r.miou).collect::<Vec<_>>());
            out.push(VariantResult {
                name: v.name.clone(),
                config_hash: v.cfg.hash(),
                align_noise: v.align_noise,
                seeds: seeds.to_vec(),
                results,
                mean_miou,
                sd_miou,
            });
        }
        let m = |name: &str| out.iter().find(|v| v.name == name).map(|v| v.mean_miou).unwrap_or(f64::NAN);
        let check = |description: &str, holds: bool| OrderingCheck { description: description.into(), holds };
        let orderings = match suite {
            AblationSuite::Losses => vec![
                check("mIoU(both) > mIoU(reg_only)", m("both") > m("reg_only")),
                check("mIoU(reg_only) > mIoU(att_only)", m("reg_only") > m("att_only")),
            ],
            AblationSuite::Selection => vec![check("mIoU(transformer) > mIoU(random)", m("transformer") > m("random"))],
            AblationSuite::NFrames => Vec::new(),
            AblationSuite::UpperBound => vec![check(
                &format!("mIoU(upper_bound) ≥ mIoU(language_free) − {UPPER_BOUND_SLACK}"),
                m("upper_bound") >= m("language_free") - UPPER_BOUND_SLACK,
            )],
            AblationSuite::Alignment => vec![check(
                "mIoU nonincreasing in alignment noise",
                out.windows(2).all(|w| w[1].mean_miou <= w[0].mean_miou),
            )],
        };
        Ok(AblationReport { suite, base_config_hash: base.hash(), configs_consistent, variants: out, orderings })
    }
}

pub fn run_ablation(suite: AblationSuite, bench: &Benchmark, base: &TrainConfig, seeds: &[u64]) -> Result<AblationReport> {
    Ablator::new(bench.clone(), Parallelism::default()).run_suite(suite, base, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn iv(s: f64, e: f64) -> TemporalInterval {
        TemporalInterval::new(s, e).unwrap()
    }

    #[test]
    fn metric_examples() {
        assert_eq!(tiou(&iv(0.2, 0.6), &iv(0.2, 0.6)).unwrap(), 1.0);
        assert_eq!(tiou(&iv(0.0, 0.2), &iv(0.5, 0.9)).unwrap(), 0.0);
        assert!((tiou(&iv(0.2, 0.6), &iv(0.4, 0.8)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(tiou(&iv(0.3, 0.3), &iv(0.3, 0.3)).unwrap(), 0.0);
        assert!((recall_at(&[0.8, 0.4, 0.6], 0.5).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(recall_at(&[0.5], 0.5).unwrap(), 0.0);
        assert!((mean_iou(&[0.8, 0.4, 0.6]).unwrap() - 60.0).abs() < 1e-9);
        assert!(recall_at(&[], 0.5).is_err() && mean_iou(&[]).is_err());
        assert!(tiou(&TemporalInterval { start: 0.6, end: 0.2 }, &iv(0.0, 1.0)).is_err());
    }

    #[test]
    fn suites_parse() {
        assert_eq!("n-frames".parse::<AblationSuite>().unwrap(), AblationSuite::NFrames);
        assert!("everything".parse::<AblationSuite>().is_err());
    }

    #[test]
    fn variant_configs_differ_only_in_the_varied_field() {
        let base = TrainConfig::desk();
        let bench = Benchmark::default();
        for suite in [AblationSuite::Losses, AblationSuite::Selection, AblationSuite::NFrames, AblationSuite::UpperBound, AblationSuite::Alignment] {
            for v in variants(suite, &base, &bench) {
                assert_eq!(reset_varied(suite, &v.cfg, &base).hash(), base.hash(), "{suite:?} {}", v.name);
            }
        }
    }

    fn interval() -> impl proptest::strategy::Strategy<Value = TemporalInterval> {
        (0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b)| iv(a.min(b), a.max(b)))
    }

    use proptest::strategy::Strategy;

    proptest! {
        #[test]
        fn tiou_properties(a in interval(), b in interval(), scale in 0.1f64..1.0, shift in 0.0f64..0.5) {
            let x = tiou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((x - tiou(&b, &a).unwrap()).abs() < 1e-15);
            let f = |i: &TemporalInterval| {
                let s = (1.0 - shift).min(scale);
                iv(shift * (1.0 - s) + i.start * s, shift * (1.0 - s) + i.end * s)
            };
            prop_assert!((x - tiou(&f(&a), &f(&b)).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn recall_is_nonincreasing(tious in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let r: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9].iter().map(|&t| recall_at(&tious, t).unwrap()).collect();
            prop_assert!(r.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(r.iter().all(|x| (0.0..=100.0).contains(x)));
        }
    }
}
