//! Synthetic JIGSAWS-shaped data for tests and CI runs without the licensed set.
//!
//! Each subject gets a latent skill in `[0, 1]`. Trials are sums of smooth
//! per-channel sinusoids plus jitter and tremor whose amplitude grows as
//! skill drops, so roughness of the signal carries the label. OSATS scores
//! are the latent skill mapped onto `1..=5` with a small per-category offset.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    format_meta_line, DatasetError, Frames, KinematicTrial, LabeledTrial, SkillLevel, Task, TrialLabels, FEATURE_DIM,
    NUM_CATEGORIES,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub tasks: Vec<Task>,
    /// Number of subjects, named `B`, `C`, ... as in the real set.
    pub subjects: usize,
    pub repetitions: u32,
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Task::KnotTying],
            subjects: 4,
            repetitions: 3,
            min_frames: 150,
            max_frames: 300,
            seed: 0,
        }
    }
}

pub fn subject_name(index: usize) -> String {
    ((b'B' + index as u8) as char).to_string()
}

fn level_for(skill: f64) -> SkillLevel {
    if skill < 0.4 {
        SkillLevel::Novice
    } else if skill < 0.7 {
        SkillLevel::Intermediate
    } else {
        SkillLevel::Expert
    }
}

/// Maps a latent skill to a Likert score.
pub fn skill_to_score(skill: f64) -> u8 {
    (1.0 + 4.0 * skill).round().clamp(1.0, 5.0) as u8
}

/// Generates labelled trials (un-normalized frames, 76 channels).
pub fn generate(config: &SyntheticConfig) -> Vec<LabeledTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n = config.subjects.max(1);
    let mut skills: Vec<f64> = (0..n)
        .map(|i| if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 })
        .collect();
    skills.shuffle(&mut rng);

    let mut out = Vec::new();
    for &task in &config.tasks {
        for (s, &base_skill) in skills.iter().enumerate() {
            let subject = subject_name(s);
            for rep in 1..=config.repetitions {
                let skill = (base_skill + 0.03 * (rep as f64 - 1.0) + 0.04 * unit.sample(&mut rng)).clamp(0.0, 1.0);
                let mut osats = [0u8; NUM_CATEGORIES];
                for o in osats.iter_mut() {
                    *o = skill_to_score(skill + 0.06 * unit.sample(&mut rng));
                }
                let len = rng.random_range(config.min_frames..=config.max_frames.max(config.min_frames));
                let frames = synth_frames(&mut rng, len, skill);
                let trial_id = format!("{}_{}{:03}", task.dir_name(), subject, rep);
                out.push(LabeledTrial {
                    trial: KinematicTrial {
                        trial_id,
                        task,
                        subject_id: subject.clone(),
                        repetition: rep,
                        frames,
                        skill_level: Some(level_for(base_skill)),
                    },
                    labels: TrialLabels::new(osats).expect("scores clamped to 1..=5"),
                });
            }
        }
    }
    out
}

fn synth_frames(rng: &mut ChaCha8Rng, len: usize, skill: f64) -> Frames {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let jitter = 0.1 + 1.2 * (1.0 - skill);
    let tremor = 0.8 * (1.0 - skill);
    let mut data = vec![0.0; len * FEATURE_DIM];
    for j in 0..FEATURE_DIM {
        let freq = rng.random_range(0.5..3.0) / 100.0;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.5..2.0);
        let offset = rng.random_range(-1.0..1.0);
        for t in 0..len {
            let tf = t as f64;
            let smooth = amp * (std::f64::consts::TAU * freq * tf + phase).sin();
            let shake = tremor * (std::f64::consts::TAU * 0.3 * tf + phase).sin();
            data[t * FEATURE_DIM + j] = offset + smooth + shake + jitter * unit.sample(rng);
        }
    }
    Frames::new(len, FEATURE_DIM, data)
}

/// Writes trials in the JIGSAWS directory layout under `root`.
pub fn write_layout(root: &Path, trials: &[LabeledTrial]) -> Result<(), DatasetError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    for task in Task::ALL {
        let of_task: Vec<&LabeledTrial> = trials.iter().filter(|t| t.trial.task == task).collect();
        if of_task.is_empty() {
            continue;
        }
        let task_dir = root.join(task.dir_name());
        let kin_dir = task_dir.join("kinematics").join("AllGestures");
        fs::create_dir_all(&kin_dir).map_err(io(&kin_dir))?;
        let mut meta = String::new();
        for lt in of_task {
            let level = lt.trial.skill_level.unwrap_or(SkillLevel::Intermediate);
            let final_product = lt.labels.score(super::OsatsCategory::OverallPerformance);
            meta.push_str(&format_meta_line(&lt.trial.trial_id, level, &lt.labels, final_product));
            meta.push('\n');
            let mut text = String::new();
            for t in 0..lt.trial.frames.len() {
                let row: Vec<String> = lt.trial.frames.row(t).iter().map(|v| format!("{v:.6e}")).collect();
                text.push_str(&row.join(" "));
                text.push('\n');
            }
            let path = kin_dir.join(format!("{}.txt", lt.trial.trial_id));
            fs::write(&path, text).map_err(io(&path))?;
        }
        let meta_path = task_dir.join(format!("meta_file_{}.txt", task.dir_name()));
        fs::write(&meta_path, meta).map_err(io(&meta_path))?;
    }
    Ok(())
}

/// Small trials whose labels are recoverable from the feature pattern.
///
/// Trial `i` gets score `i % 5 + 1` in every category and frames drawn around a
/// fixed random pattern per score (the pattern varies across features, so it
/// survives per-row normalization). Trial ids follow the knot-tying naming with
/// one subject per trial.
pub fn separable(trials: usize, frames: usize, width: usize, seed: u64) -> Vec<LabeledTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let patterns: Vec<Vec<f64>> = (0..NUM_CATEGORIES)
        .map(|_| (0..width).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    (0..trials)
        .map(|i| {
            let score = (i % NUM_CATEGORIES) as u8 + 1;
            let pattern = &patterns[score as usize - 1];
            let data = (0..frames * width)
                .map(|k| pattern[k % width] + 0.1 * unit.sample(&mut rng))
                .collect();
            let subject = subject_name(i);
            LabeledTrial {
                trial: KinematicTrial {
                    trial_id: format!("{}_{}001", Task::KnotTying.dir_name(), subject),
                    task: Task::KnotTying,
                    subject_id: subject,
                    repetition: 1,
                    frames: Frames::new(frames, width, data),
                    skill_level: None,
                },
                labels: TrialLabels::new([score; NUM_CATEGORIES]).expect("score in range"),
            }
        })
        .collect()
}
