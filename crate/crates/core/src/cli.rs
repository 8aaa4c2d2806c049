//! Command-line front end: argument parsing, configuration merging and the
//! five subcommands.

use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::synthetic::{self, SyntheticConfig};
use crate::dataset::{load_dataset, make_folds, normalize, DatasetManifest, LabeledTrial, Scheme, TaskSelection};
use crate::evaluation::{
    predict_trial, report_tables, run_cv, CvSummary, EvalError, GrsMode, RTransAssessor, SkillAssessor, TrialPrediction,
};
use crate::feedback::{build_timeline, perturb_predictions, DescriptorTable};
use crate::gradcheck;
use crate::model::{ModelConfig, RTrans, SegmentAveraging};
use crate::training::TrainConfig;

pub const DATASET_ROOT_ENV: &str = "RTRANS_DATASET_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "rtrans",
    version,
    about = "Segment-level surgical skill assessment from kinematics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset tree and write its manifest.
    Ingest(IngestArgs),
    /// Train one model per cross-validation fold.
    Train(RunArgs),
    /// Score held-out folds with trained checkpoints and build the tables.
    Eval(RunArgs),
    /// Segment-level feedback timeline for one trial.
    Report(ReportArgs),
    /// Finite-difference gradient checks on the tiny configuration.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Debug, Default, Args)]
pub struct SharedArgs {
    /// TOML file of key = value settings.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// JIGSAWS root; falls back to $RTRANS_DATASET_ROOT.
    #[arg(long, value_name = "PATH")]
    pub dataset_root: Option<PathBuf>,
    /// KT, NP, SU or across.
    #[arg(long)]
    pub task: Option<TaskSelection>,
    /// LOSO or LOUO.
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Folds trained in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Use generated trials instead of the licensed dataset.
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Clone, Debug, Default, Args)]
pub struct HyperArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub segment_len: Option<usize>,
    /// expected or argmax.
    #[arg(long)]
    pub grs_mode: Option<GrsMode>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Trial to report on; defaults to the first trial in id order.
    #[arg(long)]
    pub trial: Option<String>,
    /// Fraction of entries whose band is randomly replaced.
    #[arg(long)]
    pub flip_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Random probes per op.
    #[arg(long, default_value_t = 20)]
    pub op_seeds: usize,
}

/// Settings accepted in the `--config` file. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset_root: Option<PathBuf>,
    pub task: Option<String>,
    pub scheme: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub synthetic: Option<bool>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lambda_l2: Option<f64>,
    pub augment_rate: Option<f64>,
    pub label_smoothing: Option<f64>,
    pub noise_scale: Option<f64>,
    pub segment_len: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_hidden: Option<usize>,
    pub ffn_expansion: Option<usize>,
    pub averaging: Option<SegmentAveraging>,
    pub grs_mode: Option<GrsMode>,
    pub flip_rate: Option<f64>,
    pub synthetic_subjects: Option<usize>,
    pub synthetic_repetitions: Option<u32>,
    pub synthetic_min_frames: Option<usize>,
    pub synthetic_max_frames: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow!("config {}: {}", path.display(), e.message()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticSettings {
    pub subjects: usize,
    pub repetitions: u32,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            subjects: 4,
            repetitions: 5,
            min_frames: 150,
            max_frames: 300,
        }
    }
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset_root: Option<PathBuf>,
    pub task: TaskSelection,
    pub scheme: Scheme,
    pub out: PathBuf,
    pub jobs: usize,
    pub synthetic: bool,
    pub synthetic_data: SyntheticSettings,
    pub grs_mode: GrsMode,
    pub flip_rate: f64,
    pub seed: u64,
}

struct Resolver {
    lines: Vec<String>,
}

impl Resolver {
    fn pick<V: Debug>(&mut self, key: &str, flag: Option<V>, file: Option<V>, default: V) -> V {
        let (value, source) = match (flag, file) {
            (Some(v), _) => (v, "flag"),
            (None, Some(v)) => (v, "config file"),
            (None, None) => (default, "default"),
        };
        self.lines.push(format!("{key} = {value:?} ({source})"));
        value
    }
}

impl RunConfig {
    /// Merges flags over the config file over built-in defaults. The dataset
    /// root additionally falls back to the environment after the file.
    pub fn resolve(shared: &SharedArgs, hyper: &HyperArgs, flip_rate: Option<f64>) -> Result<Self> {
        let file = match &shared.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let parse = |v: &Option<String>, what: &str| -> Result<Option<String>> {
            Ok(v.clone().map(|s| s.trim().to_string()).filter(|s| {
                if s.is_empty() {
                    log::warn!("empty {what} in config file ignored");
                }
                !s.is_empty()
            }))
        };
        let file_task = parse(&file.task, "task")?
            .map(|s| s.parse::<TaskSelection>())
            .transpose()?;
        let file_scheme = parse(&file.scheme, "scheme")?
            .map(|s| s.parse::<Scheme>())
            .transpose()?;

        let mut r = Resolver { lines: Vec::new() };
        let env_root = std::env::var_os(DATASET_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from);
        let dataset_root = match (&shared.dataset_root, &file.dataset_root, env_root) {
            (Some(p), _, _) => Some((p.clone(), "flag")),
            (None, Some(p), _) => Some((p.clone(), "config file")),
            (None, None, Some(p)) => Some((p, DATASET_ROOT_ENV)),
            (None, None, None) => None,
        };
        match &dataset_root {
            Some((p, source)) => r
                .lines
                .push(format!("dataset_root = {:?} ({source})", p.display().to_string())),
            None => r.lines.push("dataset_root = unset".into()),
        }

        let seed = r.pick("seed", shared.seed, file.seed, 0);
        let task = r.pick(
            "task",
            shared.task,
            file_task,
            TaskSelection::Single(crate::dataset::Task::KnotTying),
        );
        let scheme = r.pick("scheme", shared.scheme, file_scheme, Scheme::Loso);
        let out = r.pick("out", shared.out.clone(), file.out.clone(), PathBuf::from("runs"));
        let jobs = r.pick("jobs", shared.jobs, file.jobs, 1);
        let synthetic = r.pick("synthetic", shared.synthetic.then_some(true), file.synthetic, false);

        let md = ModelConfig::default();
        let model = ModelConfig {
            segment_len: r.pick("segment_len", hyper.segment_len, file.segment_len, md.segment_len),
            d_model: r.pick("d_model", None, file.d_model, md.d_model),
            heads: r.pick("heads", None, file.heads, md.heads),
            mlp_hidden: r.pick("mlp_hidden", None, file.mlp_hidden, md.mlp_hidden),
            ffn_expansion: r.pick("ffn_expansion", None, file.ffn_expansion, md.ffn_expansion),
            averaging: r.pick("averaging", None, file.averaging, md.averaging),
            seed,
            ..md
        };
        let td = TrainConfig::default();
        let train = TrainConfig {
            epochs: r.pick("epochs", hyper.epochs, file.epochs, td.epochs),
            batch_size: r.pick("batch_size", hyper.batch_size, file.batch_size, td.batch_size),
            learning_rate: r.pick(
                "learning_rate",
                hyper.learning_rate,
                file.learning_rate,
                td.learning_rate,
            ),
            lambda_l2: r.pick("lambda_l2", None, file.lambda_l2, td.lambda_l2),
            augment_rate: r.pick("augment_rate", None, file.augment_rate, td.augment_rate),
            label_smoothing: r.pick("label_smoothing", None, file.label_smoothing, td.label_smoothing),
            noise_scale: r.pick("noise_scale", None, file.noise_scale, td.noise_scale),
            seed,
        };
        let sd = SyntheticSettings::default();
        let synthetic_data = SyntheticSettings {
            subjects: r.pick("synthetic_subjects", None, file.synthetic_subjects, sd.subjects),
            repetitions: r.pick(
                "synthetic_repetitions",
                None,
                file.synthetic_repetitions,
                sd.repetitions,
            ),
            min_frames: r.pick("synthetic_min_frames", None, file.synthetic_min_frames, sd.min_frames),
            max_frames: r.pick("synthetic_max_frames", None, file.synthetic_max_frames, sd.max_frames),
        };
        let grs_mode = r.pick("grs_mode", hyper.grs_mode, file.grs_mode, GrsMode::Expected);
        let flip_rate = r.pick("flip_rate", flip_rate, file.flip_rate, 0.0);

        for line in &r.lines {
            log::info!("config: {line}");
        }
        let config = RunConfig {
            model,
            train,
            dataset_root: dataset_root.map(|(p, _)| p),
            task,
            scheme,
            out,
            jobs,
            synthetic,
            synthetic_data,
            grs_mode,
            flip_rate,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            bail!("flip_rate must lie in [0, 1], got {}", self.flip_rate);
        }
        let s = &self.synthetic_data;
        if s.subjects == 0 || s.repetitions == 0 || s.min_frames == 0 || s.max_frames < s.min_frames {
            bail!("synthetic settings need subjects, repetitions and frames >= 1 with min <= max");
        }
        if !self.synthetic {
            if let Some(root) = &self.dataset_root {
                if !root.is_dir() {
                    bail!("dataset root {} is not a directory", root.display());
                }
            }
        }
        Ok(())
    }

    fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            tasks: self.task.tasks(),
            subjects: self.synthetic_data.subjects,
            repetitions: self.synthetic_data.repetitions,
            min_frames: self.synthetic_data.min_frames,
            max_frames: self.synthetic_data.max_frames,
            seed: self.seed,
        }
    }

    fn require_root(&self) -> Result<&Path> {
        self.dataset_root
            .as_deref()
            .ok_or_else(|| anyhow!("no dataset root: pass --dataset-root, set {DATASET_ROOT_ENV}, or use --synthetic"))
    }

    /// Normalized trials of the selected task(s).
    pub fn load_trials(&self) -> Result<Vec<LabeledTrial>> {
        if self.synthetic {
            synthetic::generate(&self.synthetic_config())
                .into_iter()
                .map(|mut t| {
                    t.trial.frames = normalize(&t.trial.frames, &t.trial.trial_id)?;
                    Ok(t)
                })
                .collect()
        } else {
            Ok(load_dataset(self.require_root()?, self.task, true)?)
        }
    }

    fn run_name(&self) -> String {
        format!("{}_{}", self.task.code(), self.scheme.code())
    }

    pub fn checkpoint_path(&self, fold_key: &str) -> PathBuf {
        self.out
            .join("checkpoints")
            .join(format!("{}_fold-{fold_key}.ckpt", self.run_name()))
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.out.join("logs").join(format!("{}_loss.csv", self.run_name()))
    }

    pub fn results_path(&self) -> PathBuf {
        self.out.join("results").join(format!("{}.json", self.run_name()))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&RunConfig::resolve(&a.shared, &HyperArgs::default(), None)?).map(|_| ()),
        Command::Train(a) => cmd_train(&RunConfig::resolve(&a.shared, &a.hyper, None)?),
        Command::Eval(a) => cmd_eval(&RunConfig::resolve(&a.shared, &a.hyper, None)?).map(|_| ()),
        Command::Report(a) => {
            let config = RunConfig::resolve(&a.shared, &a.hyper, a.flip_rate)?;
            cmd_report(&config, a.trial.as_deref())
        }
        Command::Gradcheck(a) => cmd_gradcheck(a.shared.seed.unwrap_or(0), a.op_seeds),
    }
}

/// Loads (or, with `--synthetic`, first writes) a dataset tree and records
/// its manifest.
pub fn cmd_ingest(config: &RunConfig) -> Result<DatasetManifest> {
    let root = if config.synthetic {
        let root = config
            .dataset_root
            .clone()
            .unwrap_or_else(|| config.out.join("synthetic_data"));
        synthetic::write_layout(&root, &synthetic::generate(&config.synthetic_config()))?;
        log::info!("wrote synthetic dataset to {}", root.display());
        root
    } else {
        config.require_root()?.to_path_buf()
    };
    let trials = load_dataset(&root, config.task, false)?;
    let manifest = DatasetManifest::from_trials(&trials);
    let path = config.out.join("manifest.json");
    write(&path, serde_json::to_string_pretty(&manifest)?)?;
    for (task, n) in &manifest.counts {
        println!("{task}: {n} trials");
    }
    println!("manifest: {}", path.display());
    Ok(manifest)
}

/// Trains every fold and writes its checkpoint plus one loss log per run.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let trials = config.load_trials()?;
    let assessor = RTransAssessor {
        model: config.model.clone(),
        train: config.train.clone(),
        grs_mode: config.grs_mode,
    };
    let run = run_cv(&assessor, &trials, config.task, config.scheme, config.jobs)?;
    let mut log = String::from("epoch,loss,fold\n");
    for (fold, fitted) in run.folds.iter().zip(&run.fitted) {
        for (i, loss) in fitted.history.iter().enumerate() {
            log.push_str(&format!("{},{},{}\n", i + 1, loss, fold.fold_key));
        }
        let path = config.checkpoint_path(&fold.fold_key);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fitted.model.save(&path)?;
        println!(
            "fold {}: final loss {:.6}, checkpoint {}",
            fold.fold_key,
            fitted.final_loss().unwrap_or(f64::NAN),
            path.display()
        );
    }
    write(&config.loss_log_path(), log)?;
    println!("loss log: {}", config.loss_log_path().display());
    Ok(())
}

/// Reads fold models back from the checkpoints `train` wrote.
struct CheckpointAssessor<'a> {
    config: &'a RunConfig,
}

impl SkillAssessor for CheckpointAssessor<'_> {
    type Fitted = RTrans<f64>;

    fn fit(&self, fold: &crate::dataset::FoldSpec, _: &[LabeledTrial]) -> Result<Self::Fitted, EvalError> {
        Ok(RTrans::load(
            &self.config.checkpoint_path(&fold.fold_key),
            Some(&self.config.model),
        )?)
    }

    fn predict(&self, fitted: &Self::Fitted, trial: &LabeledTrial) -> Result<TrialPrediction, EvalError> {
        predict_trial(fitted, &trial.trial, self.config.grs_mode)
    }
}

/// Scores every fold, writes the run's results, and rebuilds the tables from
/// all results present under the output directory.
pub fn cmd_eval(config: &RunConfig) -> Result<CvSummary> {
    let trials = config.load_trials()?;
    let run = run_cv(
        &CheckpointAssessor { config },
        &trials,
        config.task,
        config.scheme,
        config.jobs,
    )?;
    let summary = run.summary;
    write(&config.results_path(), serde_json::to_string_pretty(&summary)?)?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
    println!(
        "{} {}: {} folds, GRS SCC {}, mean OSATS SCC {}",
        summary.task,
        summary.scheme,
        summary.folds.len(),
        fmt(summary.mean_scc_grs),
        fmt(summary.mean_osats())
    );
    println!("results: {}", config.results_path().display());

    let mut all = Vec::new();
    let results_dir = config.out.join("results");
    let mut paths: Vec<PathBuf> = fs::read_dir(&results_dir)
        .with_context(|| format!("reading {}", results_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let s: CvSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        all.push(s);
    }
    let tables = report_tables(&all, true)?;
    for table in tables.iter() {
        let base = config.out.join("tables").join(&table.name);
        write(&base.with_extension("csv"), table.to_csv())?;
        write(&base.with_extension("json"), serde_json::to_string_pretty(table)?)?;
    }
    println!("tables: {}", config.out.join("tables").display());
    Ok(summary)
}

/// Predicts one trial with the model of the fold that holds it out and
/// exports its feedback timeline, optionally with perturbed bands.
pub fn cmd_report(config: &RunConfig, trial_id: Option<&str>) -> Result<()> {
    let trials = config.load_trials()?;
    let trial = match trial_id {
        Some(id) => trials
            .iter()
            .find(|t| t.id() == id)
            .ok_or_else(|| anyhow!("trial {id} not in the selected data"))?,
        None => trials
            .iter()
            .min_by(|a, b| a.id().cmp(b.id()))
            .ok_or_else(|| anyhow!("no trials loaded"))?,
    };
    let folds = make_folds(trials.iter().map(|t| &t.trial), config.scheme)?;
    let fold = folds
        .iter()
        .find(|f| f.test_ids.contains(trial.id()))
        .expect("every trial is held out by exactly one fold");
    let model = RTrans::<f64>::load(&config.checkpoint_path(&fold.fold_key), Some(&config.model))?;
    let prediction = predict_trial(&model, &trial.trial, config.grs_mode)?;
    let descriptors = DescriptorTable::builtin();
    let timeline = build_timeline(&prediction, &descriptors)?;

    let dir = config.out.join("feedback");
    let stem = trial.id();
    write(&dir.join(format!("{stem}_timeline.json")), timeline.to_json())?;
    write(&dir.join(format!("{stem}_timeline.csv")), timeline.to_csv())?;
    write(&dir.join(format!("{stem}_plot.csv")), timeline.to_plot_csv())?;
    println!(
        "{stem}: {} segments, fold {}, predicted OSATS {:?}, GRS {:.3}",
        timeline.segments(),
        fold.fold_key,
        prediction.final_osats,
        prediction.grs
    );
    if config.flip_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (shown, log) = perturb_predictions(&timeline, &mut rng, config.flip_rate, &descriptors)?;
        write(&dir.join(format!("{stem}_perturbed_timeline.json")), shown.to_json())?;
        write(&dir.join(format!("{stem}_perturbed_timeline.csv")), shown.to_csv())?;
        write(
            &dir.join(format!("{stem}_perturbation_log.json")),
            serde_json::to_string_pretty(&log)?,
        )?;
        println!("perturbed {} of {} entries", log.changes.len(), timeline.entries.len());
    }
    println!("feedback: {}", dir.display());
    Ok(())
}

pub fn cmd_gradcheck(seed: u64, op_seeds: usize) -> Result<()> {
    let config = ModelConfig {
        seed,
        ..ModelConfig::tiny()
    };
    let summary = gradcheck::run(&config, seed, op_seeds)?;
    for op in &summary.ops {
        println!("op {:<16} max relative error {:.3e}", op.op, op.max_rel_error);
    }
    println!(
        "objective: max relative error {:.3e} over {} parameters, {} segments per trial",
        summary.objective.max_rel_error, summary.objective.coordinates, summary.objective.segments_per_trial
    );
    println!(
        "max op error {:.3e} (tolerance {:e}), objective tolerance {:e}",
        summary.max_op_error(),
        gradcheck::OP_TOLERANCE,
        gradcheck::OBJECTIVE_TOLERANCE
    );
    if !summary.passed() {
        bail!(
            "gradcheck failed: objective {:.3e}, worst op {:.3e}",
            summary.objective.max_rel_error,
            summary.max_op_error()
        );
    }
    println!("gradcheck passed");
    Ok(())
}
