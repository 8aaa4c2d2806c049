//! JIGSAWS kinematics and labels: parsing, normalization, segmentation and
//! cross-validation folds.

mod folds;
mod loader;
mod normalize;
mod parse;
mod segment;
pub mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

pub use folds::{make_folds, FoldSpec, Scheme};
pub use loader::{load_dataset, load_task, DatasetManifest, ManifestEntry};
pub use normalize::{normalize, standardize_features, standardize_frames, NORM_EPS};
pub use parse::{format_meta_line, parse_kinematics, parse_meta, parse_trial_id, MetaEntry, MetaTable};
pub use segment::{segment, Segment};

/// Master + slave kinematic channels per frame.
pub const FEATURE_DIM: usize = 76;
/// OSATS categories used (quality of final product excluded).
pub const NUM_CATEGORIES: usize = 5;
/// Likert values 1..=5.
pub const NUM_CLASSES: usize = 5;
pub const DEFAULT_SEGMENT_LEN: usize = 75;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("empty kinematics file")]
    EmptyFile,
    #[error("line {line}: expected {expected} values, found {found}")]
    RowWidth { line: usize, expected: usize, found: usize },
    #[error("line {line}: non-finite or unparsable value {token:?}")]
    NonFinite { line: usize, token: String },
    #[error("meta line {line}: {reason}")]
    MalformedMeta { line: usize, reason: String },
    #[error("trial {trial}: OSATS score {value} outside [1, 5]")]
    ScoreRange { trial: String, value: i64 },
    #[error("trial {0} missing from meta file")]
    MissingTrial(String),
    #[error("unrecognized trial id {0:?}")]
    BadTrialId(String),
    #[error("trial {trial}: {frames} frames, need at least {required}")]
    DegenerateTrial {
        trial: String,
        frames: usize,
        required: usize,
    },
    #[error("trial {trial}: {frames} frames shorter than segment length {len}")]
    TooShort { trial: String, frames: usize, len: usize },
    #[error("segment length must be at least 1")]
    ZeroSegmentLength,
    #[error("{scheme} needs at least 2 distinct fold keys, found {found}")]
    InsufficientGroups { scheme: Scheme, found: usize },
    #[error("dataset layout incomplete, missing: {}", display_paths(.missing))]
    Layout { missing: Vec<PathBuf> },
    #[error("duplicate trial id {0}")]
    DuplicateTrial(String),
    #[error("unknown {kind} {value:?}")]
    UnknownVariant { kind: &'static str, value: String },
    #[error("{}: {source}", .path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    KnotTying,
    NeedlePassing,
    Suturing,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::KnotTying, Task::NeedlePassing, Task::Suturing];

    /// Directory and file-name stem used by the JIGSAWS distribution.
    pub fn dir_name(self) -> &'static str {
        match self {
            Task::KnotTying => "Knot_Tying",
            Task::NeedlePassing => "Needle_Passing",
            Task::Suturing => "Suturing",
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Task::KnotTying => "KT",
            Task::NeedlePassing => "NP",
            Task::Suturing => "SU",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Task {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| s.eq_ignore_ascii_case(t.code()) || s.eq_ignore_ascii_case(t.dir_name()))
            .ok_or_else(|| DatasetError::UnknownVariant {
                kind: "task",
                value: s.to_string(),
            })
    }
}

/// A single task or all three tasks pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskSelection {
    Single(Task),
    Across,
}

impl TaskSelection {
    pub fn tasks(self) -> Vec<Task> {
        match self {
            TaskSelection::Single(t) => vec![t],
            TaskSelection::Across => Task::ALL.to_vec(),
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            TaskSelection::Single(t) => t.code(),
            TaskSelection::Across => "across",
        }
    }
}

impl fmt::Display for TaskSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TaskSelection {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("across") || s.eq_ignore_ascii_case("AT") {
            Ok(TaskSelection::Across)
        } else {
            s.parse().map(TaskSelection::Single)
        }
    }
}

/// Self-claimed expertise from the meta file. Metadata only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SkillLevel {
    Novice,
    Intermediate,
    Expert,
}

impl SkillLevel {
    pub fn code(self) -> char {
        match self {
            SkillLevel::Novice => 'N',
            SkillLevel::Intermediate => 'I',
            SkillLevel::Expert => 'E',
        }
    }
}

impl FromStr for SkillLevel {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "N" => Ok(SkillLevel::Novice),
            "I" => Ok(SkillLevel::Intermediate),
            "E" => Ok(SkillLevel::Expert),
            _ => Err(DatasetError::UnknownVariant {
                kind: "skill level",
                value: s.to_string(),
            }),
        }
    }
}

/// OSATS categories in the fixed order used by every array in this crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OsatsCategory {
    TimeAndMotion,
    FlowOfOperation,
    SutureNeedleHandling,
    RespectForTissue,
    OverallPerformance,
}

impl OsatsCategory {
    pub const ALL: [OsatsCategory; NUM_CATEGORIES] = [
        OsatsCategory::TimeAndMotion,
        OsatsCategory::FlowOfOperation,
        OsatsCategory::SutureNeedleHandling,
        OsatsCategory::RespectForTissue,
        OsatsCategory::OverallPerformance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code().eq_ignore_ascii_case(code))
    }

    pub fn code(self) -> &'static str {
        match self {
            OsatsCategory::TimeAndMotion => "TM",
            OsatsCategory::FlowOfOperation => "FO",
            OsatsCategory::SutureNeedleHandling => "SNH",
            OsatsCategory::RespectForTissue => "RT",
            OsatsCategory::OverallPerformance => "OP",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OsatsCategory::TimeAndMotion => "time and motion",
            OsatsCategory::FlowOfOperation => "flow of operation",
            OsatsCategory::SutureNeedleHandling => "suture/needle handling",
            OsatsCategory::RespectForTissue => "respect for tissue",
            OsatsCategory::OverallPerformance => "overall performance",
        }
    }
}

impl fmt::Display for OsatsCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Five OSATS scores and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialLabels {
    osats: [u8; NUM_CATEGORIES],
    grs: u8,
}

impl TrialLabels {
    pub fn new(osats: [u8; NUM_CATEGORIES]) -> Result<Self, DatasetError> {
        if let Some(&bad) = osats.iter().find(|&&s| !(1..=5).contains(&s)) {
            return Err(DatasetError::ScoreRange {
                trial: String::new(),
                value: bad as i64,
            });
        }
        Ok(Self {
            osats,
            grs: osats.iter().sum(),
        })
    }

    pub fn osats(&self) -> [u8; NUM_CATEGORIES] {
        self.osats
    }

    pub fn score(&self, category: OsatsCategory) -> u8 {
        self.osats[category.index()]
    }

    pub fn grs(&self) -> u8 {
        self.grs
    }
}

/// Row-major `frames × features` block of kinematic samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Frames {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "frame buffer does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn width(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, t: usize, j: usize) -> f64 {
        self.data[t * self.cols + j]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    /// Frames `start..start + len` as a new block.
    pub fn window(&self, start: usize, len: usize) -> Frames {
        Frames::new(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    /// Frame order reversed.
    pub fn reversed(&self) -> Frames {
        let data = (0..self.rows).rev().flat_map(|t| self.row(t).iter().copied()).collect();
        Frames::new(self.rows, self.cols, data)
    }

    /// Population standard deviation of each column over time.
    pub fn column_std(&self) -> Vec<f64> {
        let n = self.rows as f64;
        (0..self.cols)
            .map(|j| {
                let mean = (0..self.rows).map(|t| self.at(t, j)).sum::<f64>() / n;
                let var = (0..self.rows).map(|t| (self.at(t, j) - mean).powi(2)).sum::<f64>() / n;
                var.sqrt()
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::matrix(self.rows, self.cols, self.data.iter().map(|&v| T::lit(v)).collect())
            .expect("frames are non-empty")
    }
}

/// One recorded trial.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicTrial {
    pub trial_id: String,
    pub task: Task,
    pub subject_id: String,
    pub repetition: u32,
    pub frames: Frames,
    pub skill_level: Option<SkillLevel>,
}

/// A trial paired with its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTrial {
    pub trial: KinematicTrial,
    pub labels: TrialLabels,
}

impl LabeledTrial {
    pub fn id(&self) -> &str {
        &self.trial.trial_id
    }
}
