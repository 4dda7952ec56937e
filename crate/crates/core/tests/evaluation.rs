use lfvg::embedding::{generate_synthetic_dataset, AlignmentConfig, Dataset, Provenance, QueryRecord, SynthShape, TemporalInterval, VideoRecord};
use lfvg::evaluation::{evaluate, mean_iou, random_baseline, recall_at, tiou, IntervalPredictor, THRESHOLDS};
use lfvg::training::{TrainConfig, TrainedModel};
use lfvg::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Oracle<'a>(&'a Dataset);

impl IntervalPredictor for Oracle<'_> {
    fn predict(&self, video: &VideoRecord, query: &[f64]) -> Result<TemporalInterval> {
        let q = self.0.queries.iter().find(|q| q.video_id == video.id && q.feature == query).expect("known query");
        Ok(q.gt_interval)
    }
}

struct WholeVideo;

impl IntervalPredictor for WholeVideo {
    fn predict(&self, _: &VideoRecord, _: &[f64]) -> Result<TemporalInterval> {
        TemporalInterval::new(0.0, 1.0)
    }
}

fn data() -> Dataset {
    let shape = SynthShape { n_videos: 6, segments_per_video: 16, events_per_video: 4, ..SynthShape::default() };
    generate_synthetic_dataset(&AlignmentConfig { seed: 2, ..AlignmentConfig::default() }, &shape).unwrap()
}

/// Overlap by sweeping a fine grid; independent of the closed form.
fn tiou_by_hand(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[test]
fn metrics_match_hand_counts_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for set in 0..60 {
        let n = rng.random_range(1..30);
        let pairs: Vec<((f64, f64), (f64, f64))> = (0..n)
            .map(|i| {
                let mut draw = || {
                    let (x, y): (f64, f64) = (rng.random(), rng.random());
                    (x.min(y), x.max(y))
                };
                let a = draw();
                match (set + i) % 5 {
                    0 => (a, a),
                    1 => ((a.0, a.0), draw()),
                    2 => ((a.0, a.0), (a.0, a.0)),
                    _ => (a, draw()),
                }
            })
            .collect();
        let tious: Vec<f64> = pairs
            .iter()
            .map(|&(a, b)| tiou(&TemporalInterval::new(a.0, a.1).unwrap(), &TemporalInterval::new(b.0, b.1).unwrap()).unwrap())
            .collect();
        for (t, &(a, b)) in tious.iter().zip(&pairs) {
            assert!((t - tiou_by_hand(a, b)).abs() <= 1e-9);
        }
        let mean = 100.0 * tious.iter().sum::<f64>() / n as f64;
        assert!((mean_iou(&tious).unwrap() - mean).abs() <= 1e-9);
        for th in THRESHOLDS {
            let count = tious.iter().filter(|&&t| t > th).count();
            assert!((recall_at(&tious, th).unwrap() - 100.0 * count as f64 / n as f64).abs() <= 1e-9);
        }
    }
}

#[test]
fn oracle_predictor_scores_perfectly() {
    let d = data();
    let r = evaluate(&Oracle(&d), &d).unwrap();
    assert_eq!(r.miou, 100.0);
    for th in THRESHOLDS {
        assert_eq!(r.recall(th), Some(100.0));
    }
    assert_eq!(r.n_queries, d.queries.len());
}

#[test]
fn whole_video_prediction_scores_mean_gt_length() {
    let d = data();
    let expected = 100.0 * d.queries.iter().map(|q| q.gt_interval.end - q.gt_interval.start).sum::<f64>() / d.queries.len() as f64;
    let r = evaluate(&WholeVideo, &d).unwrap();
    assert!((r.miou - expected).abs() < 1e-9);
}

#[test]
fn random_baseline_matches_numeric_integration() {
    let d = Dataset {
        videos: data().videos[..1].to_vec(),
        queries: vec![QueryRecord {
            id: "q".into(),
            video_id: data().videos[0].id.clone(),
            feature: vec![1.0; 32],
            gt_interval: TemporalInterval::new(0.25, 0.5).unwrap(),
        }],
        provenance: Provenance::Synthetic,
    };
    // Midpoint rule over the unit square of unordered draws.
    let n = 400;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (u, v) = ((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
            acc += tiou_by_hand((u.min(v), u.max(v)), (0.25, 0.5));
        }
    }
    let integral = 100.0 * acc / (n * n) as f64;
    let mc = random_baseline(&d, 200_000, 1).unwrap();
    assert!((mc - integral).abs() < 0.3, "{mc} vs {integral}");
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let d = data();
    let model = TrainedModel::init(TrainConfig { hidden: 8, ..TrainConfig::desk() }.grounding_config(32, 32), 0).unwrap();
    let before = model.fingerprint();
    evaluate(&model, &d).unwrap();
    assert_eq!(model.fingerprint(), before);
}

#[test]
fn missing_videos_are_listed() {
    let mut d = data();
    d.queries[0].video_id = "nowhere".into();
    d.queries[3].video_id = "nowhere".into();
    let err = evaluate(&WholeVideo, &d).unwrap_err();
    assert!(matches!(err, Error::Evaluation(_)));
    let msg = err.to_string();
    assert!(msg.contains(&d.queries[0].id) && msg.contains(&d.queries[3].id), "{msg}");
    d.queries.clear();
    assert!(evaluate(&WholeVideo, &d).is_err());
}
