use super::{DatasetError, Frames};

/// A contiguous window of `L` frames from one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub values: Frames,
    /// 1-based position within the trial.
    pub index: usize,
    pub start_frame: usize,
    pub parent_trial: String,
}

impl Segment {
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.values.len()
    }
}

/// Cuts `frames` into `floor(T / len)` non-overlapping windows. The trailing
/// `T mod len` frames are dropped.
pub fn segment(frames: &Frames, trial_id: &str, len: usize) -> Result<Vec<Segment>, DatasetError> {
    if len == 0 {
        return Err(DatasetError::ZeroSegmentLength);
    }
    if frames.len() < len {
        return Err(DatasetError::TooShort {
            trial: trial_id.to_string(),
            frames: frames.len(),
            len,
        });
    }
    Ok((0..frames.len() / len)
        .map(|s| Segment {
            values: frames.window(s * len, len),
            index: s + 1,
            start_frame: s * len,
            parent_trial: trial_id.to_string(),
        })
        .collect())
}
