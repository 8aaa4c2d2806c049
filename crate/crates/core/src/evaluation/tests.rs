use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::synthetic::{generate, SyntheticConfig};
use crate::dataset::{FoldSpec, Frames, LabeledTrial, Scheme, Task, TaskSelection};
use crate::model::ModelConfig;

/// Rank by counting: strictly smaller values plus half of the tied block.
fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Pearson via raw sums, deliberately a different formula from the implementation.
fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn closed_form(pred: &[f64], truth: &[f64]) -> f64 {
    let (rp, rt) = (oracle_ranks(pred), oracle_ranks(truth));
    let n = pred.len() as f64;
    let d2: f64 = rp.iter().zip(&rt).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn spearman_examples() {
    let truth = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(spearman(&truth, &truth).unwrap(), 1.0);
    assert_eq!(spearman(&[4.0, 3.0, 2.0, 1.0], &truth).unwrap(), -1.0);
    let r = spearman(&[1.0, 3.0, 2.0, 4.0], &truth).unwrap();
    assert!((r - (1.0 - 6.0 * 2.0 / (4.0 * 15.0))).abs() < 1e-15);
    assert!((r - 0.8).abs() < 1e-15);
}

#[test]
fn spearman_errors() {
    assert!(matches!(
        spearman(&[1.0], &[1.0]),
        Err(EvalError::UndefinedCorrelation(_))
    ));
    assert!(matches!(
        spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
        Err(EvalError::UndefinedCorrelation(_))
    ));
    assert!(matches!(
        spearman(&[1.0, 2.0], &[1.0]),
        Err(EvalError::LengthMismatch { .. })
    ));
}

#[test]
fn average_ranks_share_ties() {
    assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
}

#[test]
fn spearman_matches_oracles_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut tie_free = 0;
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..=10);
        let with_ties = checked % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if with_ties {
                        rng.random_range(1..=4) as f64
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect()
        };
        let (p, t) = (draw(&mut rng), draw(&mut rng));
        let Ok(got) = spearman(&p, &t) else {
            // Constant draws have no correlation; the oracle agrees.
            assert!(oracle_pearson(&oracle_ranks(&p), &oracle_ranks(&t)).is_nan());
            continue;
        };
        let expected = oracle_pearson(&oracle_ranks(&p), &oracle_ranks(&t));
        assert!((got - expected).abs() <= 1e-12, "{p:?} {t:?}: {got} vs {expected}");
        let distinct = |v: &[f64]| v.iter().all(|a| v.iter().filter(|&b| b == a).count() == 1);
        if distinct(&p) && distinct(&t) {
            assert!((got - closed_form(&p, &t)).abs() <= 1e-12);
            tie_free += 1;
        }
        checked += 1;
    }
    assert!(tie_free >= 400);
}

#[test]
fn grs_examples() {
    assert_eq!(aggregate_grs(&[5.0; 5]).unwrap(), 25.0);
    assert_eq!(aggregate_grs(&[1.0; 5]).unwrap(), 5.0);
    assert_eq!(aggregate_grs(&[3.0, 2.0, 4.0, 3.0, 3.0]).unwrap(), 15.0);
    assert!(matches!(
        aggregate_grs(&[0.0, 2.0, 4.0, 3.0, 3.0]),
        Err(EvalError::Range(_))
    ));
    assert!(matches!(
        aggregate_grs(&[6.0, 2.0, 4.0, 3.0, 3.0]),
        Err(EvalError::Range(_))
    ));
}

fn one_hot_logits(scores: [u8; 5], peak: f64) -> Vec<Vec<f64>> {
    scores
        .iter()
        .map(|&s| (1..=5).map(|k| if k == s { peak } else { 0.0 }).collect())
        .collect()
}

#[test]
fn constant_head_predicts_top_scores() {
    let logits = one_hot_logits([5; 5], 60.0);
    let p = predict_from_outputs(
        "t",
        75,
        vec![0, 75],
        &[logits.clone(), logits.clone()],
        &logits,
        SegmentAveraging::Logits,
        GrsMode::Argmax,
    )
    .unwrap();
    assert_eq!(p.final_osats, [5; 5]);
    assert_eq!(p.grs, 25.0);
    assert_eq!(p.segment_scores(1), [5; 5]);
    assert!(p.expected_osats.iter().all(|&e| (e - 5.0).abs() < 1e-9));
}

#[test]
fn prediction_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let segs: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| {
            (0..5)
                .map(|_| (0..5).map(|_| rng.random_range(-4.0..4.0)).collect())
                .collect()
        })
        .collect();
    let avg: Vec<Vec<f64>> = (0..5)
        .map(|n| {
            (0..5)
                .map(|k| segs.iter().map(|s| s[n][k]).sum::<f64>() / 3.0)
                .collect()
        })
        .collect();
    let p = predict_from_outputs(
        "t",
        4,
        vec![0, 4, 8],
        &segs,
        &avg,
        SegmentAveraging::Logits,
        GrsMode::Expected,
    )
    .unwrap();
    for probs in p.segment_probs.iter().chain(std::iter::once(&p.trial_probs)) {
        for row in probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    assert!((p.grs - p.expected_osats.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn prediction_rejects_missing_segments() {
    let err = predict_from_outputs(
        "t",
        4,
        vec![],
        &[],
        &one_hot_logits([1; 5], 1.0),
        SegmentAveraging::Logits,
        GrsMode::Expected,
    );
    assert!(err.is_err());
}

#[test]
fn predict_trial_is_deterministic() {
    let model = RTrans::<f64>::new(ModelConfig::tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames = Frames::new(10, 6, (0..60).map(|_| rng.random_range(-1.0..1.0)).collect());
    let trial = crate::dataset::KinematicTrial {
        trial_id: "Knot_Tying_B001".into(),
        task: Task::KnotTying,
        subject_id: "B".into(),
        repetition: 1,
        frames,
        skill_level: None,
    };
    let a = predict_trial(&model, &trial, GrsMode::Expected).unwrap();
    let b = predict_trial(&model, &trial, GrsMode::Expected).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.segment_starts, vec![0, 4]);
    assert!(a.expected_osats.iter().all(|e| (1.0..=5.0).contains(e)));

    let mut short = trial.clone();
    short.frames = short.frames.window(0, 3);
    assert!(matches!(
        predict_trial(&model, &short, GrsMode::Expected),
        Err(EvalError::Dataset(crate::dataset::DatasetError::TooShort { .. }))
    ));
}

/// Reports every trial's ground-truth labels as its prediction.
struct Oracle;

impl SkillAssessor for Oracle {
    type Fitted = usize;

    fn fit(&self, _: &FoldSpec, train: &[LabeledTrial]) -> Result<usize, EvalError> {
        Ok(train.len())
    }

    fn predict(&self, _: &usize, trial: &LabeledTrial) -> Result<TrialPrediction, EvalError> {
        let logits = one_hot_logits(trial.labels.osats(), 50.0);
        predict_from_outputs(
            trial.id(),
            1,
            vec![0],
            std::slice::from_ref(&logits),
            &logits,
            SegmentAveraging::Logits,
            GrsMode::Argmax,
        )
    }
}

fn eight_subjects() -> Vec<LabeledTrial> {
    generate(&SyntheticConfig {
        subjects: 8,
        repetitions: 5,
        min_frames: 20,
        max_frames: 30,
        seed: 3,
        ..SyntheticConfig::default()
    })
}

#[test]
fn louo_over_eight_subjects_gives_eight_folds() {
    let data = eight_subjects();
    let run = run_cv(&Oracle, &data, TaskSelection::Single(Task::KnotTying), Scheme::Louo, 2).unwrap();
    assert_eq!(run.summary.folds.len(), 8);
    assert_eq!(run.fitted, vec![35; 8]);
    assert!(run.summary.folds.iter().all(|f| f.n_test == 5));
}

#[test]
fn ground_truth_stub_scores_one() {
    let data = eight_subjects();
    for scheme in [Scheme::Loso, Scheme::Louo] {
        let run = run_cv(&Oracle, &data, TaskSelection::Single(Task::KnotTying), scheme, 1).unwrap();
        let s = &run.summary;
        assert!(s.folds.len() - s.undefined_grs_folds > 0);
        assert!((s.mean_scc_grs.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            s.undefined_grs_folds,
            s.folds.iter().filter(|f| f.scc_grs.is_none()).count()
        );
    }
}

#[test]
fn parallel_folds_match_sequential() {
    let data = eight_subjects();
    let sel = TaskSelection::Single(Task::KnotTying);
    let a = run_cv(&Oracle, &data, sel, Scheme::Louo, 1).unwrap();
    let b = run_cv(&Oracle, &data, sel, Scheme::Louo, 8).unwrap();
    assert_eq!(a.summary, b.summary);
}

fn summary(task: &str, scheme: Scheme, grs: f64, osats: [f64; 5]) -> CvSummary {
    CvSummary {
        task: task.into(),
        scheme,
        folds: Vec::new(),
        mean_scc_grs: Some(grs),
        mean_scc_osats: osats.map(Some),
        undefined_grs_folds: 0,
        undefined_osats_folds: [0; 5],
    }
}

#[test]
fn tables_place_computed_rows_beside_references() {
    let results = vec![
        summary("KT", Scheme::Loso, 0.5, [0.1, 0.2, 0.3, 0.4, 0.5]),
        summary("NP", Scheme::Louo, 0.25, [0.0; 5]),
    ];
    let t = report_tables(&results, true).unwrap();
    let ours = t.table1.rows.last().unwrap();
    assert_eq!(ours.source, "computed");
    assert_eq!(ours.cells[0], Some(0.5));
    assert_eq!(ours.cells[3], Some(0.25));
    assert_eq!(ours.cells[1], None);

    let published = t.table3.rows.iter().find(|r| r.method.contains("published")).unwrap();
    assert_eq!(published.cells, vec![Some(0.83), Some(0.78), Some(0.81), Some(0.81)]);
    let mmm = t.table3.rows.iter().find(|r| r.method == "MMM").unwrap();
    assert_eq!(mmm.cells[3], Some(0.67));

    // Computed row: RT (index 3), TM (index 0), OP (index 4) and their mean.
    let ours3 = t.table3.rows.last().unwrap();
    assert_eq!(&ours3.cells[..3], &[Some(0.4), Some(0.1), Some(0.5)]);
    let mean = (0.4 + 0.1 + 0.5) / 3.0;
    assert!((ours3.cells[3].unwrap() - mean).abs() <= 1e-12);

    let ours2 = t.table2.rows.last().unwrap();
    assert!((ours2.cells[0].unwrap() - 0.3).abs() <= 1e-12);
    assert!(t.table1.to_csv().starts_with("method,input,source,KT_LOSO"));
}

#[test]
fn tables_without_references_still_render() {
    let t = report_tables(&[summary("across", Scheme::Loso, 0.6, [0.5; 5])], false).unwrap();
    for table in t.iter() {
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].source, "computed");
        assert_eq!(table.to_csv().lines().count(), 2);
    }
    assert_eq!(t.table1.rows[0].cells[6], Some(0.6));
    assert!(matches!(report_tables(&[], true), Err(EvalError::NoResults)));
}

#[test]
fn published_grs_row() {
    let r = table1_references();
    let ours = r.iter().find(|r| r.method.contains("R-Tran")).unwrap();
    assert_eq!(ours.cells[0], Some(0.89));
    assert_eq!(ours.cells[2], Some(0.78));
    assert_eq!(ours.cells[4], Some(0.73));
    assert_eq!(ours.cells[6], Some(0.68));
    assert_eq!(TABLE2_RTRANS_ACROSS_ALT, 0.54);
}

proptest! {
    #[test]
    fn spearman_invariant_under_monotone_maps(
        pairs in proptest::collection::vec((-50i32..50, -50i32..50), 2..12),
    ) {
        let p: Vec<f64> = pairs.iter().map(|x| x.0 as f64).collect();
        let t: Vec<f64> = pairs.iter().map(|x| x.1 as f64).collect();
        if let Ok(base) = spearman(&p, &t) {
            let mapped: Vec<f64> = p.iter().map(|v| (v / 10.0).exp() + 3.0 * v).collect();
            let flipped: Vec<f64> = t.iter().map(|v| v * v * v).collect();
            prop_assert!((spearman(&mapped, &flipped).unwrap() - base).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }

    #[test]
    fn grs_is_permutation_invariant(scores in proptest::array::uniform5(1u8..=5), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let a = scores.map(f64::from);
        let mut b = a;
        b.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(aggregate_grs(&a).unwrap(), aggregate_grs(&b).unwrap());
    }

    #[test]
    fn expected_scores_stay_in_range(z in proptest::collection::vec(-30.0f64..30.0, 25)) {
        let avg: Vec<Vec<f64>> = z.chunks(5).map(<[f64]>::to_vec).collect();
        let p = predict_from_outputs("t", 1, vec![0], std::slice::from_ref(&avg), &avg, SegmentAveraging::Logits, GrsMode::Expected).unwrap();
        prop_assert!(p.expected_osats.iter().all(|e| (1.0..=5.0).contains(e)));
        prop_assert!((5.0..=25.0).contains(&p.grs));
    }
}
