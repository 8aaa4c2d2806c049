use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{predict_trial, spearman, EvalError, GrsMode, TrialPrediction};
use crate::dataset::{make_folds, FoldSpec, LabeledTrial, OsatsCategory, Scheme, TaskSelection, NUM_CATEGORIES};
use crate::model::{ModelConfig, RTrans};
use crate::scalar::Scalar;
use crate::training::{train, TrainConfig};

/// Anything that can be fit on a training split and score held-out trials.
pub trait SkillAssessor: Sync {
    type Fitted: Send;

    fn fit(&self, fold: &FoldSpec, train: &[LabeledTrial]) -> Result<Self::Fitted, EvalError>;

    fn predict(&self, fitted: &Self::Fitted, trial: &LabeledTrial) -> Result<TrialPrediction, EvalError>;
}

/// The recurrent transformer trained from scratch on every fold.
#[derive(Clone, Debug)]
pub struct RTransAssessor {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grs_mode: GrsMode,
}

/// A trained fold model and its epoch loss history.
#[derive(Clone, Debug)]
pub struct FittedRTrans<T> {
    pub model: RTrans<T>,
    pub history: Vec<f64>,
}

impl SkillAssessor for RTransAssessor {
    type Fitted = FittedRTrans<f64>;

    fn fit(&self, fold: &FoldSpec, trials: &[LabeledTrial]) -> Result<Self::Fitted, EvalError> {
        log::info!("fold {}: training on {} trials", fold.fold_key, trials.len());
        let out = train::<f64>(trials, &self.model, &self.train)?;
        Ok(FittedRTrans {
            model: out.model,
            history: out.history,
        })
    }

    fn predict(&self, fitted: &Self::Fitted, trial: &LabeledTrial) -> Result<TrialPrediction, EvalError> {
        predict_trial(&fitted.model, &trial.trial, self.grs_mode)
    }
}

impl<T: Scalar> FittedRTrans<T> {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial_id: String,
    pub true_osats: [u8; NUM_CATEGORIES],
    pub true_grs: u8,
    pub predicted_osats: [u8; NUM_CATEGORIES],
    pub expected_osats: [f64; NUM_CATEGORIES],
    pub predicted_grs: f64,
}

/// Correlations on one held-out fold. `None` marks an undefined correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_key: String,
    pub scc_grs: Option<f64>,
    /// In the category order TM, FO, SNH, RT, OP.
    pub scc_per_osats: [Option<f64>; NUM_CATEGORIES],
    pub n_test: usize,
    pub trials: Vec<TrialOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    /// Task code (`KT`, `NP`, `SU`) or `across`.
    pub task: String,
    pub scheme: Scheme,
    pub folds: Vec<FoldResult>,
    pub mean_scc_grs: Option<f64>,
    pub mean_scc_osats: [Option<f64>; NUM_CATEGORIES],
    pub undefined_grs_folds: usize,
    pub undefined_osats_folds: [usize; NUM_CATEGORIES],
}

impl CvSummary {
    /// Mean over categories of the per-category fold averages.
    pub fn mean_osats(&self) -> Option<f64> {
        mean(self.mean_scc_osats.iter().flatten().copied())
    }

    pub fn category_scc(&self, category: OsatsCategory) -> Option<f64> {
        self.mean_scc_osats[category.index()]
    }
}

pub struct CvRun<F> {
    pub summary: CvSummary,
    pub folds: Vec<FoldSpec>,
    /// Fitted model of each fold, in fold order.
    pub fitted: Vec<F>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn defined(r: Result<f64, EvalError>) -> Result<Option<f64>, EvalError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(EvalError::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn score_fold(
    fold: &FoldSpec,
    tests: &[&LabeledTrial],
    predictions: Vec<TrialPrediction>,
) -> Result<FoldResult, EvalError> {
    let truth_grs: Vec<f64> = tests.iter().map(|t| f64::from(t.labels.grs())).collect();
    let pred_grs: Vec<f64> = predictions.iter().map(|p| p.grs).collect();
    let scc_grs = defined(spearman(&pred_grs, &truth_grs))?;
    let mut scc_per_osats = [None; NUM_CATEGORIES];
    for (n, slot) in scc_per_osats.iter_mut().enumerate() {
        let truth: Vec<f64> = tests.iter().map(|t| f64::from(t.labels.osats()[n])).collect();
        let pred: Vec<f64> = predictions.iter().map(|p| p.scores()[n]).collect();
        *slot = defined(spearman(&pred, &truth))?;
    }
    let trials = tests
        .iter()
        .zip(&predictions)
        .map(|(t, p)| TrialOutcome {
            trial_id: t.id().to_string(),
            true_osats: t.labels.osats(),
            true_grs: t.labels.grs(),
            predicted_osats: p.final_osats,
            expected_osats: p.expected_osats,
            predicted_grs: p.grs,
        })
        .collect();
    Ok(FoldResult {
        fold_key: fold.fold_key.clone(),
        scc_grs,
        scc_per_osats,
        n_test: tests.len(),
        trials,
    })
}

fn run_fold<A: SkillAssessor>(
    assessor: &A,
    trials: &[LabeledTrial],
    fold: &FoldSpec,
) -> Result<(FoldResult, A::Fitted), EvalError> {
    let train: Vec<LabeledTrial> = trials
        .iter()
        .filter(|t| fold.train_ids.contains(t.id()))
        .cloned()
        .collect();
    let tests: Vec<&LabeledTrial> = trials.iter().filter(|t| fold.test_ids.contains(t.id())).collect();
    let fitted = assessor.fit(fold, &train)?;
    let predictions = tests
        .iter()
        .map(|t| assessor.predict(&fitted, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((score_fold(fold, &tests, predictions)?, fitted))
}

type Slot<F> = Mutex<Option<Result<(FoldResult, F), EvalError>>>;

/// Cross-validates `assessor` over every fold of `scheme`.
///
/// Folds run on up to `jobs` threads; results are ordered by fold key
/// regardless of completion order. Folds whose correlation is undefined are
/// left out of the averages and counted.
pub fn run_cv<A: SkillAssessor>(
    assessor: &A,
    trials: &[LabeledTrial],
    selection: TaskSelection,
    scheme: Scheme,
    jobs: usize,
) -> Result<CvRun<A::Fitted>, EvalError> {
    let folds = make_folds(trials.iter().map(|t| &t.trial), scheme)?;
    let slots: Vec<Slot<A::Fitted>> = folds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, folds.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(fold) = folds.get(i) else { break };
                let result = run_fold(assessor, trials, fold).map_err(|e| EvalError::Fold {
                    fold: fold.fold_key.clone(),
                    source: Box::new(e),
                });
                *slots[i].lock().expect("fold slot") = Some(result);
            });
        }
    });

    let mut results = Vec::with_capacity(folds.len());
    let mut fitted = Vec::with_capacity(folds.len());
    for slot in slots {
        let (r, f) = slot.into_inner().expect("fold slot").expect("every fold ran")?;
        results.push(r);
        fitted.push(f);
    }

    let undefined_grs_folds = results.iter().filter(|r| r.scc_grs.is_none()).count();
    if undefined_grs_folds > 0 {
        log::warn!("{undefined_grs_folds} fold(s) with undefined GRS correlation excluded from the average");
    }
    let summary = CvSummary {
        task: selection.code().to_string(),
        scheme,
        mean_scc_grs: mean(results.iter().filter_map(|r| r.scc_grs)),
        mean_scc_osats: std::array::from_fn(|n| mean(results.iter().filter_map(|r| r.scc_per_osats[n]))),
        undefined_grs_folds,
        undefined_osats_folds: std::array::from_fn(|n| results.iter().filter(|r| r.scc_per_osats[n].is_none()).count()),
        folds: results,
    };
    Ok(CvRun { summary, folds, fitted })
}
