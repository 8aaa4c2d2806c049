use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::evaluation::{predict_from_outputs, GrsMode};
use crate::model::SegmentAveraging;

/// Direct summation with a multiplicatively built binomial coefficient.
fn oracle_tail(k: u64, n: u64, p: f64) -> f64 {
    (k..=n)
        .map(|i| {
            let mut c = 1.0f64;
            for j in 1..=i {
                c *= (n - i + j) as f64 / j as f64;
            }
            c * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32)
        })
        .sum()
}

fn prediction(segment_scores: &[[u8; 5]], segment_len: usize) -> TrialPrediction {
    let logits: Vec<Vec<Vec<f64>>> = segment_scores
        .iter()
        .map(|s| {
            s.iter()
                .map(|&v| (1..=5).map(|k| if k == v { 30.0 } else { 0.0 }).collect())
                .collect()
        })
        .collect();
    let avg: Vec<Vec<f64>> = (0..5)
        .map(|n| {
            (0..5)
                .map(|k| logits.iter().map(|s| s[n][k]).sum::<f64>() / logits.len() as f64)
                .collect()
        })
        .collect();
    predict_from_outputs(
        "Knot_Tying_B001",
        segment_len,
        (0..segment_scores.len()).map(|s| s * segment_len).collect(),
        &logits,
        &avg,
        SegmentAveraging::Logits,
        GrsMode::Expected,
    )
    .unwrap()
}

#[test]
fn band_examples() {
    assert_eq!(categorize(2).unwrap(), Band::Poor);
    assert_eq!(categorize(3).unwrap(), Band::Average);
    assert_eq!(categorize(5).unwrap(), Band::Good);
    assert_eq!(categorize(1).unwrap(), Band::Poor);
    assert_eq!(categorize(4).unwrap(), Band::Good);
    assert!(matches!(categorize(0), Err(FeedbackError::Range(_))));
    assert!(matches!(categorize(6), Err(FeedbackError::Range(_))));
}

#[test]
fn bands_are_surjective() {
    let hit: std::collections::BTreeSet<Band> = (1..=5).map(|s| categorize(s).unwrap()).collect();
    assert_eq!(hit.len(), 3);
}

#[test]
fn builtin_descriptors_are_complete() {
    let t = DescriptorTable::builtin();
    assert_eq!(t.len(), 15);
    for c in OsatsCategory::ALL {
        for b in Band::ALL {
            assert!(!t.get(c, b).unwrap().is_empty());
        }
    }
}

#[test]
fn incomplete_descriptor_table_is_rejected() {
    let json = r#"{"entries": [{"category": "TM", "band": "poor", "text": "x"}]}"#;
    assert!(matches!(
        DescriptorTable::from_json(json),
        Err(FeedbackError::MissingDescriptor { .. })
    ));
    let bad = r#"{"entries": [{"category": "XX", "band": "poor", "text": "x"}]}"#;
    assert!(matches!(
        DescriptorTable::from_json(bad),
        Err(FeedbackError::DescriptorTable(_))
    ));
}

#[test]
fn timeline_cardinality_and_spans() {
    let pred = prediction(&[[1, 2, 3, 4, 5], [5, 4, 3, 2, 1]], 75);
    let t = build_timeline(&pred, &DescriptorTable::builtin()).unwrap();
    assert_eq!(t.entries.len(), 2 * 5);
    assert_eq!(t.segments(), 2);
    let spans: Vec<(usize, usize)> = t
        .entries
        .iter()
        .filter(|e| e.category == OsatsCategory::TimeAndMotion)
        .map(|e| (e.start_frame, e.end_frame))
        .collect();
    assert_eq!(spans, vec![(0, 75), (75, 150)]);
    assert_eq!(t.scores(OsatsCategory::TimeAndMotion), vec![1, 5]);
    assert_eq!(t.headline(), vec![Band::Good, Band::Poor]);
}

#[test]
fn constant_scores_give_constant_bands() {
    let pred = prediction(&[[3; 5]; 4], 10);
    let t = build_timeline(&pred, &DescriptorTable::builtin()).unwrap();
    for c in OsatsCategory::ALL {
        assert_eq!(t.bands(c), vec![Band::Average; 4]);
    }
}

#[test]
fn exports_have_documented_columns() {
    let pred = prediction(&[[1, 2, 3, 4, 5]], 75);
    let t = build_timeline(&pred, &DescriptorTable::builtin()).unwrap();
    let csv = t.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "segment,start_frame,end_frame,category,score,band,descriptor"
    );
    assert!(lines.next().unwrap().starts_with("1,0,75,TM,1,poor,"));
    assert_eq!(csv.lines().count(), 6);
    let plot = t.to_plot_csv();
    assert_eq!(plot, "segment,start_frame,TM,FO,SNH,RT,OP\n1,0,1,2,3,4,5\n");
    let back: FeedbackTimeline = serde_json::from_str(&t.to_json()).unwrap();
    assert_eq!(back, t);
}

#[test]
fn perturbation_extremes() {
    let pred = prediction(&[[1, 3, 5, 2, 4]; 6], 75);
    let table = DescriptorTable::builtin();
    let t = build_timeline(&pred, &table).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (same, log) = perturb_predictions(&t, &mut rng, 0.0, &table).unwrap();
    assert_eq!(same, t);
    assert!(log.changes.is_empty());

    let (all, log) = perturb_predictions(&t, &mut rng, 1.0, &table).unwrap();
    assert_eq!(log.changes.len(), t.entries.len());
    for (a, b) in all.entries.iter().zip(&t.entries) {
        assert_ne!(a.band, b.band);
        assert_eq!(a.score, b.score);
        assert_eq!(a.descriptor, table.get(a.category, a.band).unwrap());
    }
    assert!(perturb_predictions(&t, &mut rng, 1.5, &table).is_err());
}

#[test]
fn empirical_flip_fraction_matches_rate() {
    let table = DescriptorTable::builtin();
    // 2,000 segments x 5 categories = 10,000 entries.
    let pred = prediction(&vec![[2, 3, 4, 1, 5]; 2000], 5);
    let t = build_timeline(&pred, &table).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for rate in [0.1, 0.3, 0.5, 0.9] {
        let (_, log) = perturb_predictions(&t, &mut rng, rate, &table).unwrap();
        let n = t.entries.len() as f64;
        let frac = log.changes.len() as f64 / n;
        let bound = 3.0 * (rate * (1.0 - rate) / n).sqrt();
        assert!((frac - rate).abs() <= bound, "rate {rate}: {frac}");
    }
}

#[test]
fn binomial_examples() {
    assert_eq!(binomial_test_one_tailed(0, 10, 0.3).unwrap(), 1.0);
    assert!((binomial_test_one_tailed(3, 3, 0.5).unwrap() - 0.125).abs() < 1e-15);
    let p = binomial_test_one_tailed(154, 200, 0.69).unwrap();
    assert!(p < 0.05);
    assert!((p - oracle_tail(154, 200, 0.69)).abs() < 1e-10);
    assert!(binomial_test_one_tailed(4, 3, 0.5).is_err());
    assert!(binomial_test_one_tailed(1, 3, 0.0).is_err());
    assert!(binomial_test_one_tailed(1, 3, 1.0).is_err());
}

#[test]
fn binomial_matches_oracle_on_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let n = rng.random_range(1..=500u64);
        let k = rng.random_range(0..=n);
        let p = rng.random_range(0.01..0.99);
        let got = binomial_test_one_tailed(k, n, p).unwrap();
        let expected = oracle_tail(k, n, p);
        assert!((got - expected).abs() < 1e-10, "k={k} n={n} p={p}: {got} vs {expected}");
    }
}

proptest! {
    #[test]
    fn binomial_is_monotone_in_k(n in 1u64..500, p in 0.01f64..0.99) {
        let mut last = f64::INFINITY;
        for k in 0..=n {
            let v = binomial_test_one_tailed(k, n, p).unwrap();
            prop_assert!(v <= last, "k={} {} > {}", k, v, last);
            last = v;
        }
    }

    #[test]
    fn timeline_is_lossless(scores in proptest::collection::vec(proptest::array::uniform5(1u8..=5), 1..8)) {
        let pred = prediction(&scores, 7);
        let t = build_timeline(&pred, &DescriptorTable::builtin()).unwrap();
        for c in OsatsCategory::ALL {
            let recovered = t.scores(c);
            let expected: Vec<u8> = scores.iter().map(|s| s[c.index()]).collect();
            prop_assert_eq!(recovered, expected);
        }
    }

    #[test]
    fn perturbation_logs_exactly_the_changes(seed in any::<u64>(), rate in 0.0f64..=1.0) {
        let table = DescriptorTable::builtin();
        let pred = prediction(&[[1, 2, 3, 4, 5], [5, 5, 3, 1, 1], [2, 4, 4, 3, 2]], 5);
        let t = build_timeline(&pred, &table).unwrap();
        let (out, log) = perturb_predictions(&t, &mut ChaCha8Rng::seed_from_u64(seed), rate, &table).unwrap();
        let changed: Vec<usize> = (0..t.entries.len()).filter(|&i| out.entries[i].band != t.entries[i].band).collect();
        let logged: Vec<usize> = log.changes.iter().map(|c| c.entry).collect();
        prop_assert_eq!(changed, logged);
        for c in &log.changes {
            prop_assert_eq!(c.original, t.entries[c.entry].band);
            prop_assert_eq!(c.shown, out.entries[c.entry].band);
        }
    }
}
