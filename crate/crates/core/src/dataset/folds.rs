use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DatasetError, KinematicTrial};

/// Cross-validation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Leave one supertrial (repetition index) out.
    #[serde(rename = "LOSO")]
    Loso,
    /// Leave one user (subject) out.
    #[serde(rename = "LOUO")]
    Louo,
}

impl Scheme {
    pub fn code(self) -> &'static str {
        match self {
            Scheme::Loso => "LOSO",
            Scheme::Louo => "LOUO",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Scheme {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "LOSO" => Ok(Scheme::Loso),
            "LOUO" => Ok(Scheme::Louo),
            _ => Err(DatasetError::UnknownVariant {
                kind: "scheme",
                value: s.to_string(),
            }),
        }
    }
}

/// One held-out group and the train/test partition it induces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub scheme: Scheme,
    pub fold_key: String,
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
enum FoldKey {
    Repetition(u32),
    Subject(String),
}

impl FoldKey {
    fn of(trial: &KinematicTrial, scheme: Scheme) -> Self {
        match scheme {
            Scheme::Loso => FoldKey::Repetition(trial.repetition),
            Scheme::Louo => FoldKey::Subject(trial.subject_id.clone()),
        }
    }

    fn label(&self) -> String {
        match self {
            FoldKey::Repetition(r) => r.to_string(),
            FoldKey::Subject(s) => s.clone(),
        }
    }
}

/// One fold per distinct repetition (LOSO) or subject (LOUO), ordered by key.
pub fn make_folds<'a, I>(trials: I, scheme: Scheme) -> Result<Vec<FoldSpec>, DatasetError>
where
    I: IntoIterator<Item = &'a KinematicTrial>,
{
    let mut groups: BTreeMap<FoldKey, BTreeSet<String>> = BTreeMap::new();
    let mut all = BTreeSet::new();
    for trial in trials {
        if !all.insert(trial.trial_id.clone()) {
            return Err(DatasetError::DuplicateTrial(trial.trial_id.clone()));
        }
        groups
            .entry(FoldKey::of(trial, scheme))
            .or_default()
            .insert(trial.trial_id.clone());
    }
    if groups.len() < 2 {
        return Err(DatasetError::InsufficientGroups {
            scheme,
            found: groups.len(),
        });
    }
    Ok(groups
        .into_iter()
        .map(|(key, test_ids)| FoldSpec {
            scheme,
            fold_key: key.label(),
            train_ids: all.difference(&test_ids).cloned().collect(),
            test_ids,
        })
        .collect())
}
