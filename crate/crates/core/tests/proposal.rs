use lfvg::embedding::{generate_synthetic_dataset, AlignmentConfig, SynthShape};
use lfvg::proposal::{generate_proposals, kmeans_cluster, merge_consecutive, MergePolicy, DEFAULT_K};
use lfvg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn clean_videos_recover_hidden_events() {
    let cfg = AlignmentConfig { obs_noise_sigma: 0.0, seed: 3, ..AlignmentConfig::default() };
    let shape = SynthShape { n_videos: 100, events_per_video: DEFAULT_K, ..SynthShape::default() };
    let data = generate_synthetic_dataset(&cfg, &shape).unwrap();
    let exact = data
        .videos
        .iter()
        .filter(|v| {
            let props = generate_proposals(&v.segment_features, DEFAULT_K, MergePolicy::default(), 0).unwrap();
            let mut base: Vec<(usize, usize)> = props.iter().filter(|p| p.merged_from == 1).map(|p| (p.first, p.last)).collect();
            base.sort();
            let hidden: Vec<(usize, usize)> = v.hidden_events.as_ref().unwrap().iter().map(|e| (e.first, e.last)).collect();
            base == hidden
        })
        .count();
    assert!(exact >= 95, "{exact}/100 videos matched exactly");
}

#[test]
fn kmeans_inertia_never_increases() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (rng.random_range(10..40), rng.random_range(1..6));
        let f = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let km = kmeans_cluster(&f, rng.random_range(2..6), seed).unwrap();
        assert!(!km.inertia_history.is_empty());
        for w in km.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "seed {seed}: {:?}", km.inertia_history);
        }
        assert_eq!(*km.inertia_history.last().unwrap(), km.inertia);
    }
}

/// Every composition of `t` into `n` positive parts, as contiguous spans.
fn compositions(t: usize, n: usize) -> Vec<Vec<(usize, usize)>> {
    if n == 1 {
        return vec![vec![(0, t - 1)]];
    }
    let mut out = Vec::new();
    for first_len in 1..=t - (n - 1) {
        for rest in compositions(t - first_len, n - 1) {
            let mut spans = vec![(0, first_len - 1)];
            spans.extend(rest.iter().map(|&(a, b)| (a + first_len, b + first_len)));
            out.push(spans);
        }
    }
    out
}

/// Independent enumeration: all `(i, j)` event windows, ordered by window
/// size then start.
fn oracle(events: &[(usize, usize)], policy: MergePolicy, t: usize) -> Vec<(usize, usize, usize)> {
    let mut all = Vec::new();
    for i in 0..events.len() {
        for j in i..events.len() {
            let m = j - i + 1;
            let (a, b) = (events[i].0, events[j].1);
            if m <= policy.max_merge && b - a + 1 >= policy.min_len {
                all.push((m, a, b));
            }
        }
    }
    all.sort();
    if all.len() > 1 {
        all.retain(|&(_, a, b)| !(a == 0 && b == t - 1));
    }
    all.into_iter().map(|(m, a, b)| (a, b, m)).collect()
}

#[test]
fn merge_matches_exhaustive_window_enumeration() {
    let mut cases = 0;
    for n in 1..=5 {
        for t in n..=n + 4 {
            for events in compositions(t, n) {
                for max_merge in 1..=4 {
                    for min_len in 1..=3 {
                        let policy = MergePolicy { max_merge, min_len };
                        let got: Vec<(usize, usize, usize)> =
                            merge_consecutive(&events, policy, t).iter().map(|p| (p.first, p.last, p.merged_from)).collect();
                        assert_eq!(got, oracle(&events, policy, t), "{events:?} {policy:?}");
                        cases += 1;
                    }
                }
            }
        }
    }
    assert!(cases > 1000);
}

#[test]
fn short_videos_fall_back_to_the_whole_span() {
    let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let props = generate_proposals(&f, 3, MergePolicy { max_merge: 1, min_len: 2 }, 0).unwrap();
    assert_eq!(props.len(), 1);
    assert_eq!((props[0].first, props[0].last), (0, 2));
    assert!(generate_proposals(&f, 4, MergePolicy::default(), 0).is_err());
}
