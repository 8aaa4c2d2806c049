//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL/SKIP line; exits nonzero if any criterion fails.
//!
//! Criterion 7 needs the licensed dataset and hours of CPU time. It runs only
//! with `RTRANS_DATASET_ROOT` set and `--include-ignored` (or `--ignored`)
//! passed to the test binary.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtrans::dataset::synthetic::separable;
use rtrans::dataset::{load_dataset, segment, Frames, Scheme, Task, TaskSelection, TrialLabels};
use rtrans::evaluation::{
    aggregate_grs, predict_from_outputs, predict_trial, run_cv, spearman, GrsMode, RTransAssessor,
};
use rtrans::feedback::{binomial_test_one_tailed, categorize, Band};
use rtrans::model::{Mode, ModelConfig, RTrans, SegmentAveraging};
use rtrans::training::{segment_tensors, train, TrainConfig};

const GRAD_OBJECTIVE_TOL: f64 = 1e-3;
const GRAD_OP_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 120.0;
const SPEARMAN_TOL: f64 = 1e-12;
const SPEARMAN_CLOSED_FORM_TOL: f64 = 1e-12;
const SPEARMAN_BUDGET_S: f64 = 10.0;
const OVERFIT_RATIO: f64 = 0.10;
const OVERFIT_SCC: f64 = 0.95;
const OVERFIT_BUDGET_S: f64 = 600.0;
const SEGMENT_MEAN_TOL: f64 = 1e-12;
const BINOMIAL_TOL: f64 = 1e-10;
const TABLE_TOL: f64 = 0.2;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn criterion_1_gradients() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        seed: 3,
        ..ModelConfig::tiny()
    };
    let summary = match rtrans::gradcheck::run(&config, 3, 20) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("gradcheck errored: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let ok = summary.objective.max_rel_error < GRAD_OBJECTIVE_TOL
        && summary.max_op_error() < GRAD_OP_TOL
        && summary.objective.segments_per_trial == 2
        && summary.objective.coordinates == config.parameter_count()
        && secs < GRAD_BUDGET_S;
    outcome(
        ok,
        format!(
            "objective {:.2e} < {GRAD_OBJECTIVE_TOL:e} over {} params, worst of {} ops {:.2e} < {GRAD_OP_TOL:e}, {secs:.1}s < {GRAD_BUDGET_S}s",
            summary.objective.max_rel_error,
            summary.objective.coordinates,
            summary.ops.len(),
            summary.max_op_error()
        ),
    )
}

/// Rank of each entry: one plus the count of smaller entries plus half the
/// other entries it ties with.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va.sqrt() * vb.sqrt()))
}

fn criterion_2_spearman() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut worst_closed, mut tie_free, mut undefined) = (0.0f64, 0.0f64, 0usize, 0usize);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let n = rng.random_range(2..=10);
        let with_ties = case % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if with_ties {
                        rng.random_range(1..=4) as f64
                    } else {
                        rng.random_range(-100.0..100.0)
                    }
                })
                .collect()
        };
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        let expected = pearson(&brute_ranks(&x), &brute_ranks(&y));
        match (spearman(&x, &y), expected) {
            (Ok(got), Some(want)) => worst = worst.max((got - want).abs()),
            (Err(_), None) => {
                undefined += 1;
                continue;
            }
            (got, want) => {
                failures.push(format!("case {case}: {got:?} vs {want:?}"));
                continue;
            }
        }
        let distinct = |v: &[f64]| v.iter().enumerate().all(|(i, a)| v[..i].iter().all(|b| a != b));
        if distinct(&x) && distinct(&y) {
            tie_free += 1;
            let (rx, ry) = (brute_ranks(&x), brute_ranks(&y));
            let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
            let nf = n as f64;
            let closed = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
            worst_closed = worst_closed.max((spearman(&x, &y).unwrap_or(f64::NAN) - closed).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty()
        && worst <= SPEARMAN_TOL
        && worst_closed <= SPEARMAN_CLOSED_FORM_TOL
        && tie_free > 0
        && secs < SPEARMAN_BUDGET_S;
    let mut detail = format!(
        "1000 vectors: oracle gap {worst:.1e} <= {SPEARMAN_TOL:e}; {tie_free} tie-free vs closed form {worst_closed:.1e} <= {SPEARMAN_CLOSED_FORM_TOL:e}; {undefined} undefined on both sides; {secs:.2}s"
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {} disagreements, first {f}", failures.len()));
    }
    outcome(ok, detail)
}

fn criterion_3_overfit() -> Outcome {
    let start = Instant::now();
    let data = separable(8, 16, 8, 1);
    let model_config = ModelConfig {
        segment_len: 8,
        d_model: 8,
        heads: 2,
        mlp_hidden: 16,
        ..ModelConfig::default()
    };
    let train_config = TrainConfig {
        epochs: 500,
        batch_size: 8,
        learning_rate: 1e-3,
        lambda_l2: 0.0,
        augment_rate: 0.0,
        label_smoothing: 0.0,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = match train::<f64>(&data, &model_config, &train_config) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("training errored: {e}")),
    };
    let first = out.history[0];
    let last = *out.history.last().expect("500 epochs");
    let predicted: Vec<f64> = data
        .iter()
        .map(|t| predict_trial(&out.model, &t.trial, GrsMode::Expected).map(|p| p.grs))
        .collect::<Result<_, _>>()
        .unwrap_or_default();
    let truth: Vec<f64> = data.iter().map(|t| f64::from(t.labels.grs())).collect();
    let scc = spearman(&predicted, &truth).unwrap_or(f64::NAN);
    let secs = start.elapsed().as_secs_f64();
    let ratio = last / first;
    outcome(
        ratio < OVERFIT_RATIO && scc >= OVERFIT_SCC && secs < OVERFIT_BUDGET_S,
        format!(
            "loss {first:.4} -> {last:.4} (ratio {ratio:.4} < {OVERFIT_RATIO}), train GRS SCC {scc:.4} >= {OVERFIT_SCC}, {secs:.1}s"
        ),
    )
}

fn run_train(out: &Path, config: &Path, jobs: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_rtrans"))
        .args(["train", "--synthetic", "--seed", "17", "--jobs", jobs, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).trim().to_string());
    }
    Ok(())
}

fn tree_files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable output dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).expect("readable output file");
                out.push((path.strip_prefix(root).expect("under root").to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn criterion_4_determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "epochs = 4\nbatch_size = 3\nlearning_rate = 1e-3\nsegment_len = 25\nheads = 2\nmlp_hidden = 16\n\
         synthetic_subjects = 3\nsynthetic_repetitions = 3\nsynthetic_min_frames = 50\nsynthetic_max_frames = 80\n",
    )
    .expect("write config");
    let runs = [("a", "1"), ("b", "1"), ("c", "3")];
    for (name, jobs) in runs {
        if let Err(e) = run_train(&dir.path().join(name), &config, jobs) {
            return outcome(false, format!("train run {name} failed: {e}"));
        }
    }
    let trees: Vec<_> = runs
        .iter()
        .map(|(name, _)| tree_files(&dir.path().join(name)))
        .collect();
    let checkpoints = trees[0]
        .iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "ckpt"))
        .count();
    let logs = trees[0]
        .iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "csv"))
        .count();
    let identical = trees[0] == trees[1];
    let jobs_invariant = trees[0] == trees[2];
    outcome(
        identical && jobs_invariant && checkpoints == 3 && logs == 1,
        format!(
            "two runs byte-identical: {identical} ({checkpoints} checkpoints, {logs} loss log); --jobs 3 identical to --jobs 1: {jobs_invariant}"
        ),
    )
}

fn criterion_5_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut problems = Vec::new();

    // Segment mean of the head outputs equals the trial-level logits.
    let mut worst_mean = 0.0f64;
    for case in 0..20 {
        let config = ModelConfig {
            seed: case,
            ..ModelConfig::tiny()
        };
        let model = RTrans::<f64>::new(config.clone()).expect("tiny config");
        let rows = rng.random_range(config.segment_len..=6 * config.segment_len);
        let data = (0..rows * config.d_model)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let frames = Frames::new(rows, config.d_model, data);
        let inputs = segment_tensors::<f64>(&frames, "inv", &config).expect("segmentable");
        let out = model.forward_trial(&inputs, Mode::Eval).expect("forward");
        let s = out.segment_logits.len() as f64;
        for n in 0..5 {
            for k in 0..5 {
                let mean = out.segment_logits.iter().map(|seg| seg[n][k]).sum::<f64>() / s;
                worst_mean = worst_mean.max((mean - out.averaged[n][k]).abs());
            }
        }
    }
    if worst_mean > SEGMENT_MEAN_TOL {
        problems.push(format!("segment mean gap {worst_mean:.1e}"));
    }

    // GRS is the sum of the five category scores, for labels and predictions.
    for _ in 0..500 {
        let osats: [u8; 5] = std::array::from_fn(|_| rng.random_range(1..=5));
        let labels = TrialLabels::new(osats).expect("in range");
        if u32::from(labels.grs()) != osats.iter().map(|&v| u32::from(v)).sum::<u32>() {
            problems.push(format!("label GRS of {osats:?}"));
        }
        let segs = rng.random_range(1..=4);
        let logits: Vec<Vec<Vec<f64>>> = (0..segs)
            .map(|_| {
                (0..5)
                    .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
                    .collect()
            })
            .collect();
        let averaged: Vec<Vec<f64>> = (0..5)
            .map(|n| {
                (0..5)
                    .map(|k| logits.iter().map(|s| s[n][k]).sum::<f64>() / segs as f64)
                    .collect()
            })
            .collect();
        for mode in [GrsMode::Expected, GrsMode::Argmax] {
            let p = predict_from_outputs(
                "x",
                10,
                (0..segs).map(|s| s * 10).collect(),
                &logits,
                &averaged,
                SegmentAveraging::Logits,
                mode,
            )
            .expect("valid outputs");
            let sum: f64 = p.scores().iter().sum();
            if p.grs != sum || aggregate_grs(&p.scores()).ok() != Some(sum) || !(5.0..=25.0).contains(&p.grs) {
                problems.push(format!("prediction GRS {} vs {sum}", p.grs));
            }
        }
    }

    // Band mapping.
    let bands: Vec<Option<Band>> = (0..=6).map(|s| categorize(s).ok()).collect();
    let expected = [
        None,
        Some(Band::Poor),
        Some(Band::Poor),
        Some(Band::Average),
        Some(Band::Good),
        Some(Band::Good),
        None,
    ];
    if bands != expected {
        problems.push(format!("bands {bands:?}"));
    }

    // Segmentation keeps floor(T / L) * L frames in order, without overlap.
    for _ in 0..300 {
        let len = rng.random_range(1..=20);
        let rows = rng.random_range(len..=200);
        let frames = Frames::new(rows, 2, (0..rows * 2).map(|i| i as f64).collect());
        let segs = segment(&frames, "seg", len).expect("long enough");
        let kept: Vec<f64> = segs.iter().flat_map(|s| s.values.data().to_vec()).collect();
        let ok = segs.len() == rows / len
            && kept.len() == (rows / len) * len * 2
            && kept == frames.data()[..kept.len()]
            && segs
                .iter()
                .enumerate()
                .all(|(i, s)| s.start_frame == i * len && s.index == i + 1);
        if !ok {
            problems.push(format!("segmentation T={rows} L={len}"));
            break;
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "segment mean gap {worst_mean:.1e} <= {SEGMENT_MEAN_TOL:e}; GRS sums, band map, segmentation conservation: {}",
            if problems.is_empty() { "all hold".to_string() } else { problems.join("; ") }
        ),
    )
}

/// Direct summation of the upper tail with a multiplicative binomial coefficient.
fn tail_oracle(k: u64, n: u64, p: f64) -> f64 {
    (k..=n)
        .map(|i| {
            let c: f64 = (1..=i).map(|j| (n - i + j) as f64 / j as f64).product();
            c * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32)
        })
        .sum()
}

fn criterion_6_binomial() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst = 0.0f64;
    let mut monotone = true;
    for _ in 0..200 {
        let n = rng.random_range(1..=500u64);
        let p = rng.random_range(0.01..0.99);
        let mut last = f64::INFINITY;
        for k in 0..=n {
            let v = match binomial_test_one_tailed(k, n, p) {
                Ok(v) => v,
                Err(e) => return outcome(false, format!("n={n} k={k} p={p}: {e}")),
            };
            monotone &= v <= last;
            last = v;
            if k % 7 == 0 || k == n {
                worst = worst.max((v - tail_oracle(k, n, p)).abs());
            }
        }
    }
    outcome(
        worst < BINOMIAL_TOL && monotone,
        format!("200 random (n <= 500, p): oracle gap {worst:.1e} < {BINOMIAL_TOL:e}; non-increasing in k: {monotone}"),
    )
}

fn criterion_7_licensed(root: &Path) -> Outcome {
    let published = [
        (TaskSelection::Single(Task::KnotTying), 0.89),
        (TaskSelection::Single(Task::NeedlePassing), 0.78),
        (TaskSelection::Single(Task::Suturing), 0.73),
        (TaskSelection::Across, 0.68),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (selection, reference) in published {
        let trials = match load_dataset(root, selection, true) {
            Ok(t) => t,
            Err(e) => return outcome(false, format!("loading {selection}: {e}")),
        };
        let assessor = RTransAssessor {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grs_mode: GrsMode::Expected,
        };
        let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
        match run_cv(&assessor, &trials, selection, Scheme::Loso, jobs) {
            Ok(run) => {
                let scc = run.summary.mean_scc_grs.unwrap_or(f64::NAN);
                let within = (scc - reference).abs() <= TABLE_TOL;
                ok &= within;
                parts.push(format!(
                    "{selection} {scc:.3} vs {reference} ({})",
                    if within { "ok" } else { "out" }
                ));
            }
            Err(e) => return outcome(false, format!("{selection}: {e}")),
        }
    }
    outcome(ok, format!("LOSO GRS SCC within {TABLE_TOL}: {}", parts.join(", ")))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // libtest flags such as --list or --format would otherwise be ignored silently.
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let run_ignored = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");

    let criteria: [Criterion; 6] = [
        ("gradient correctness", criterion_1_gradients),
        ("spearman oracle equivalence", criterion_2_spearman),
        ("overfit smoke test", criterion_3_overfit),
        ("determinism", criterion_4_determinism),
        ("aggregation invariants", criterion_5_invariants),
        ("binomial test", criterion_6_binomial),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.passed);
        println!(
            "criterion {} {name}: {} | {}",
            i + 1,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }

    let root = std::env::var_os("RTRANS_DATASET_ROOT").map(PathBuf::from);
    match (root, run_ignored) {
        (Some(root), true) => {
            let o = criterion_7_licensed(&root);
            println!(
                "criterion 7 published-table agreement (conditional, non-blocking): {} | {}",
                if o.passed { "PASS" } else { "FAIL" },
                o.detail
            );
        }
        (root, _) => println!(
            "criterion 7 published-table agreement (conditional, non-blocking): SKIP | {}",
            if root.is_none() {
                "RTRANS_DATASET_ROOT not set"
            } else {
                "hours of CPU time; pass --include-ignored to run"
            }
        ),
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criterion/criteria failed");
        std::process::exit(1);
    }
}
