use std::collections::BTreeMap;

use super::{DatasetError, Frames, SkillLevel, Task, TrialLabels, FEATURE_DIM, NUM_CATEGORIES};

/// Parses a kinematics file: one whitespace-separated row of 76 reals per frame.
///
/// Blank lines are skipped; line numbers in errors are 1-based file lines.
pub fn parse_kinematics(text: &str) -> Result<Frames, DatasetError> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let start = data.len();
        for token in line.split_whitespace() {
            let v: f64 = token.parse().map_err(|_| DatasetError::NonFinite {
                line: line_no,
                token: token.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::NonFinite {
                    line: line_no,
                    token: token.to_string(),
                });
            }
            data.push(v);
        }
        let found = data.len() - start;
        if found != FEATURE_DIM {
            return Err(DatasetError::RowWidth {
                line: line_no,
                expected: FEATURE_DIM,
                found,
            });
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DatasetError::EmptyFile);
    }
    Ok(Frames::new(rows, FEATURE_DIM, data))
}

/// Splits an id such as `Knot_Tying_B001` into task, subject `B` and repetition 1.
pub fn parse_trial_id(trial_id: &str) -> Result<(Task, String, u32), DatasetError> {
    let bad = || DatasetError::BadTrialId(trial_id.to_string());
    let (stem, tail) = trial_id.rsplit_once('_').ok_or_else(bad)?;
    let task: Task = stem.parse().map_err(|_| bad())?;
    let digits_at = tail.find(|c: char| c.is_ascii_digit()).ok_or_else(bad)?;
    let (subject, rep) = tail.split_at(digits_at);
    if subject.is_empty() || !subject.chars().all(|c| c.is_ascii_alphabetic()) {
        return Err(bad());
    }
    let repetition: u32 = rep.parse().map_err(|_| bad())?;
    if repetition == 0 {
        return Err(bad());
    }
    Ok((task, subject.to_string(), repetition))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaEntry {
    pub labels: TrialLabels,
    pub skill_level: SkillLevel,
}

/// Parsed meta file keyed by trial id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaTable {
    entries: BTreeMap<String, MetaEntry>,
}

impl MetaTable {
    pub fn get(&self, trial_id: &str) -> Result<&MetaEntry, DatasetError> {
        self.entries
            .get(trial_id)
            .ok_or_else(|| DatasetError::MissingTrial(trial_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &MetaEntry)> {
        self.entries.iter()
    }
}

/// Meta-file column order of the six element scores.
const META_RESPECT_FOR_TISSUE: usize = 0;
const META_NEEDLE_HANDLING: usize = 1;
const META_TIME_AND_MOTION: usize = 2;
const META_FLOW: usize = 3;
const META_OVERALL: usize = 4;

/// Parses a JIGSAWS meta file.
///
/// Each line is `trial_id level grs s1 .. s6` with the element scores in the
/// distribution's order (tissue, handling, time and motion, flow, overall,
/// final product). The final-product score is dropped and the GRS recomputed
/// over the remaining five.
pub fn parse_meta(text: &str) -> Result<MetaTable, DatasetError> {
    let mut entries = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let line_no = i + 1;
        let malformed = |reason: String| DatasetError::MalformedMeta { line: line_no, reason };
        if tokens.len() < 9 {
            return Err(malformed(format!("expected 9 fields, found {}", tokens.len())));
        }
        let trial = tokens[0].to_string();
        let skill_level: SkillLevel = tokens[1]
            .parse()
            .map_err(|_| malformed(format!("unknown skill level {:?}", tokens[1])))?;
        let mut elements = [0u8; 6];
        for (slot, token) in elements.iter_mut().zip(&tokens[3..9]) {
            let v: i64 = token
                .parse()
                .map_err(|_| malformed(format!("non-integer score {token:?}")))?;
            if !(1..=5).contains(&v) {
                return Err(DatasetError::ScoreRange {
                    trial: trial.clone(),
                    value: v,
                });
            }
            *slot = v as u8;
        }
        let osats: [u8; NUM_CATEGORIES] = [
            elements[META_TIME_AND_MOTION],
            elements[META_FLOW],
            elements[META_NEEDLE_HANDLING],
            elements[META_RESPECT_FOR_TISSUE],
            elements[META_OVERALL],
        ];
        let labels = TrialLabels::new(osats)?;
        if entries
            .insert(trial.clone(), MetaEntry { labels, skill_level })
            .is_some()
        {
            return Err(DatasetError::DuplicateTrial(trial));
        }
    }
    Ok(MetaTable { entries })
}

/// Renders a meta line in the distribution's column order. Inverse of [`parse_meta`]
/// for the five retained scores; the final-product column is written as `final_product`.
pub fn format_meta_line(trial_id: &str, level: SkillLevel, labels: &TrialLabels, final_product: u8) -> String {
    let o = labels.osats();
    // internal order: TM, FO, SNH, RT, OP
    let elements = [o[3], o[2], o[0], o[1], o[4], final_product];
    let grs: u32 = elements.iter().map(|&v| v as u32).sum();
    let scores: Vec<String> = elements.iter().map(u8::to_string).collect();
    format!("{trial_id}\t{}\t{grs}\t{}", level.code(), scores.join("\t"))
}
