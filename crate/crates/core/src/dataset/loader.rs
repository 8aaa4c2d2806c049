use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    normalize, parse_kinematics, parse_meta, parse_trial_id, DatasetError, KinematicTrial, LabeledTrial, SkillLevel,
    Task, TaskSelection, NUM_CATEGORIES,
};

fn meta_path(root: &Path, task: Task) -> PathBuf {
    root.join(task.dir_name())
        .join(format!("meta_file_{}.txt", task.dir_name()))
}

fn kinematics_path(root: &Path, task: Task, trial_id: &str) -> PathBuf {
    root.join(task.dir_name())
        .join("kinematics")
        .join("AllGestures")
        .join(format!("{trial_id}.txt"))
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every labelled trial of one task from a JIGSAWS directory tree.
///
/// With `normalize_frames` set, each trial is normalized independently.
pub fn load_task(root: &Path, task: Task, normalize_frames: bool) -> Result<Vec<LabeledTrial>, DatasetError> {
    let meta_file = meta_path(root, task);
    if !meta_file.is_file() {
        return Err(DatasetError::Layout {
            missing: vec![meta_file],
        });
    }
    let meta = parse_meta(&read(&meta_file)?)?;
    let missing: Vec<PathBuf> = meta
        .iter()
        .map(|(id, _)| kinematics_path(root, task, id))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(DatasetError::Layout { missing });
    }

    let mut trials = Vec::with_capacity(meta.len());
    for (trial_id, entry) in meta.iter() {
        let (id_task, subject_id, repetition) = parse_trial_id(trial_id)?;
        if id_task != task {
            return Err(DatasetError::BadTrialId(trial_id.clone()));
        }
        let path = kinematics_path(root, task, trial_id);
        let mut frames = parse_kinematics(&read(&path)?).map_err(|e| annotate(e, &path))?;
        if normalize_frames {
            frames = normalize(&frames, trial_id)?;
        }
        trials.push(LabeledTrial {
            trial: KinematicTrial {
                trial_id: trial_id.clone(),
                task,
                subject_id,
                repetition,
                frames,
                skill_level: Some(entry.skill_level),
            },
            labels: entry.labels,
        });
    }
    Ok(trials)
}

fn annotate(err: DatasetError, path: &Path) -> DatasetError {
    match err {
        DatasetError::Io { .. } => err,
        other => DatasetError::InFile {
            path: path.to_path_buf(),
            source: Box::new(other),
        },
    }
}

/// Loads one task or all three pooled. A missing task directory is reported
/// together with every other missing file.
pub fn load_dataset(
    root: &Path,
    selection: TaskSelection,
    normalize_frames: bool,
) -> Result<Vec<LabeledTrial>, DatasetError> {
    let mut all = Vec::new();
    let mut missing = Vec::new();
    for task in selection.tasks() {
        match load_task(root, task, normalize_frames) {
            Ok(trials) => all.extend(trials),
            Err(DatasetError::Layout { missing: m }) => missing.extend(m),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(DatasetError::Layout { missing });
    }
    Ok(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub trial_id: String,
    pub task: Task,
    pub subject_id: String,
    pub repetition: u32,
    pub frames: usize,
    pub features: usize,
    pub osats: [u8; NUM_CATEGORIES],
    pub grs: u8,
    pub skill_level: Option<SkillLevel>,
}

/// JSON-serializable summary of a loaded dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Trial count per task code.
    pub counts: BTreeMap<String, usize>,
    pub trials: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn from_trials(trials: &[LabeledTrial]) -> Self {
        let mut counts = BTreeMap::new();
        let entries = trials
            .iter()
            .map(|lt| {
                *counts.entry(lt.trial.task.code().to_string()).or_insert(0) += 1;
                ManifestEntry {
                    trial_id: lt.trial.trial_id.clone(),
                    task: lt.trial.task,
                    subject_id: lt.trial.subject_id.clone(),
                    repetition: lt.trial.repetition,
                    frames: lt.trial.frames.len(),
                    features: lt.trial.frames.width(),
                    osats: lt.labels.osats(),
                    grs: lt.labels.grs(),
                    skill_level: lt.trial.skill_level,
                }
            })
            .collect();
        Self {
            counts,
            trials: entries,
        }
    }
}
