//! Qualitative feedback from segment-level scores, and the rater-study protocol.

mod binomial;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{OsatsCategory, NUM_CATEGORIES};
use crate::evaluation::TrialPrediction;

pub use binomial::binomial_test_one_tailed;

const DEFAULT_DESCRIPTORS: &str = include_str!("../../data/descriptors.json");

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("value out of range: {0}")]
    Range(String),
    #[error("no descriptor for {category} / {band}")]
    MissingDescriptor { category: OsatsCategory, band: Band },
    #[error("bad descriptor table: {0}")]
    DescriptorTable(String),
    #[error("prediction has no segments")]
    NoSegments,
}

/// Three-way grouping of a 1..=5 score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Poor,
    Average,
    Good,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Poor, Band::Average, Band::Good];

    pub fn as_str(self) -> &'static str {
        match self {
            Band::Poor => "poor",
            Band::Average => "average",
            Band::Good => "good",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// 1-2 poor, 3 average, 4-5 good.
pub fn categorize(score: u8) -> Result<Band, FeedbackError> {
    match score {
        1 | 2 => Ok(Band::Poor),
        3 => Ok(Band::Average),
        4 | 5 => Ok(Band::Good),
        _ => Err(FeedbackError::Range(format!("score {score} outside 1..=5"))),
    }
}

#[derive(Deserialize)]
struct DescriptorFile {
    #[serde(default)]
    source: String,
    entries: Vec<DescriptorEntry>,
}

#[derive(Deserialize)]
struct DescriptorEntry {
    category: String,
    band: Band,
    text: String,
}

/// Anchor text per (category, band).
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorTable {
    pub source: String,
    texts: BTreeMap<(OsatsCategory, Band), String>,
}

impl DescriptorTable {
    /// Parses a table; every category/band pair must be present and non-empty.
    pub fn from_json(json: &str) -> Result<Self, FeedbackError> {
        let file: DescriptorFile =
            serde_json::from_str(json).map_err(|e| FeedbackError::DescriptorTable(e.to_string()))?;
        let mut texts = BTreeMap::new();
        for e in file.entries {
            let category = OsatsCategory::from_code(&e.category)
                .ok_or_else(|| FeedbackError::DescriptorTable(format!("unknown category {:?}", e.category)))?;
            if e.text.trim().is_empty() {
                return Err(FeedbackError::DescriptorTable(format!(
                    "empty text for {category} / {}",
                    e.band
                )));
            }
            if texts.insert((category, e.band), e.text).is_some() {
                return Err(FeedbackError::DescriptorTable(format!(
                    "duplicate entry {category} / {}",
                    e.band
                )));
            }
        }
        let table = Self {
            source: file.source,
            texts,
        };
        for category in OsatsCategory::ALL {
            for band in Band::ALL {
                table.get(category, band)?;
            }
        }
        Ok(table)
    }

    /// The table shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_DESCRIPTORS).expect("bundled descriptor table is complete")
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn get(&self, category: OsatsCategory, band: Band) -> Result<&str, FeedbackError> {
        self.texts
            .get(&(category, band))
            .map(String::as_str)
            .ok_or(FeedbackError::MissingDescriptor { category, band })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    /// 1-based segment position.
    pub segment: usize,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub category: OsatsCategory,
    pub score: u8,
    pub band: Band,
    pub descriptor: String,
}

/// Per-segment, per-category scores with their qualitative reading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackTimeline {
    pub trial_id: String,
    pub segment_len: usize,
    /// Segment-major, categories in canonical order within each segment.
    pub entries: Vec<TimelineEntry>,
}

impl FeedbackTimeline {
    pub fn segments(&self) -> usize {
        self.entries.len() / NUM_CATEGORIES
    }

    /// Score series of one category, in segment order.
    pub fn scores(&self, category: OsatsCategory) -> Vec<u8> {
        self.series(category).map(|e| e.score).collect()
    }

    pub fn bands(&self, category: OsatsCategory) -> Vec<Band> {
        self.series(category).map(|e| e.band).collect()
    }

    /// Overall-performance band series, the headline view.
    pub fn headline(&self) -> Vec<Band> {
        self.bands(OsatsCategory::OverallPerformance)
    }

    fn series(&self, category: OsatsCategory) -> impl Iterator<Item = &TimelineEntry> {
        self.entries.iter().filter(move |e| e.category == category)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timeline serializes")
    }

    /// `segment,start_frame,end_frame,category,score,band,descriptor`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,start_frame,end_frame,category,score,band,descriptor\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{},\"{}\"\n",
                e.segment,
                e.start_frame,
                e.end_frame,
                e.category.code(),
                e.score,
                e.band,
                e.descriptor.replace('"', "\"\"")
            ));
        }
        out
    }

    /// One row per segment with the score of every category, for plotting.
    pub fn to_plot_csv(&self) -> String {
        let header: Vec<&str> = OsatsCategory::ALL.iter().map(|c| c.code()).collect();
        let mut out = format!("segment,start_frame,{}\n", header.join(","));
        for chunk in self.entries.chunks(NUM_CATEGORIES) {
            let scores: Vec<String> = chunk.iter().map(|e| e.score.to_string()).collect();
            out.push_str(&format!(
                "{},{},{}\n",
                chunk[0].segment,
                chunk[0].start_frame,
                scores.join(",")
            ));
        }
        out
    }
}

/// Expands a prediction into one timeline entry per segment and category.
pub fn build_timeline(
    prediction: &TrialPrediction,
    descriptors: &DescriptorTable,
) -> Result<FeedbackTimeline, FeedbackError> {
    if prediction.segment_probs.is_empty() {
        return Err(FeedbackError::NoSegments);
    }
    let mut entries = Vec::with_capacity(prediction.segment_probs.len() * NUM_CATEGORIES);
    for (s, &start) in prediction.segment_starts.iter().enumerate() {
        let scores = prediction.segment_scores(s);
        for category in OsatsCategory::ALL {
            let score = scores[category.index()];
            let band = categorize(score)?;
            entries.push(TimelineEntry {
                segment: s + 1,
                start_frame: start,
                end_frame: start + prediction.segment_len,
                category,
                score,
                band,
                descriptor: descriptors.get(category, band)?.to_string(),
            });
        }
    }
    Ok(FeedbackTimeline {
        trial_id: prediction.trial_id.clone(),
        segment_len: prediction.segment_len,
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Index into the timeline's entries.
    pub entry: usize,
    pub original: Band,
    pub shown: Band,
}

/// Which entries were altered, kept for unblinding.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbationLog {
    pub flip_rate: f64,
    pub changes: Vec<Perturbation>,
}

/// With probability `flip_rate`, replaces each entry's band (and its
/// descriptor) with one of the two other bands chosen uniformly. Scores are
/// left as predicted so the log can be audited against them.
pub fn perturb_predictions(
    timeline: &FeedbackTimeline,
    rng: &mut ChaCha8Rng,
    flip_rate: f64,
    descriptors: &DescriptorTable,
) -> Result<(FeedbackTimeline, PerturbationLog), FeedbackError> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(FeedbackError::Range(format!("flip rate {flip_rate} outside [0, 1]")));
    }
    let mut out = timeline.clone();
    let mut log = PerturbationLog {
        flip_rate,
        changes: Vec::new(),
    };
    for (i, e) in out.entries.iter_mut().enumerate() {
        if rng.random::<f64>() >= flip_rate {
            continue;
        }
        let others: Vec<Band> = Band::ALL.into_iter().filter(|&b| b != e.band).collect();
        let shown = others[rng.random_range(0..others.len())];
        log.changes.push(Perturbation {
            entry: i,
            original: e.band,
            shown,
        });
        e.band = shown;
        e.descriptor = descriptors.get(e.category, shown)?.to_string();
    }
    Ok((out, log))
}

#[cfg(test)]
mod tests;
