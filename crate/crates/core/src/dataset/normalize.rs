use super::{DatasetError, Frames};

/// Standard-deviation floor for the z-score denominators.
pub const NORM_EPS: f64 = 1e-8;

const MAX_SWEEPS: usize = 500;
const CONVERGENCE_TOL: f64 = 1e-12;

/// Z-scores every feature column over time.
pub fn standardize_features(frames: &Frames) -> Frames {
    let (t, d) = (frames.len(), frames.width());
    let n = t as f64;
    let mut out = frames.clone();
    for j in 0..d {
        let mean = (0..t).map(|r| frames.at(r, j)).sum::<f64>() / n;
        let var = (0..t).map(|r| (frames.at(r, j) - mean).powi(2)).sum::<f64>() / n;
        let denom = var.sqrt() + NORM_EPS;
        for r in 0..t {
            out.data_mut()[r * d + j] = (frames.at(r, j) - mean) / denom;
        }
    }
    out
}

/// Z-scores every frame across the feature axis.
pub fn standardize_frames(frames: &Frames) -> Frames {
    let d = frames.width();
    let n = d as f64;
    let mut out = frames.clone();
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let src = frames.row(r);
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let denom = var.sqrt() + NORM_EPS;
        for (o, &v) in row.iter_mut().zip(src) {
            *o = (v - mean) / denom;
        }
    }
    out
}

/// Normalizes a trial across time and feature dimensions.
///
/// One sweep applies [`standardize_features`] then [`standardize_frames`].
/// Sweeps repeat until the matrix stops changing (max elementwise change
/// below 1e-12, at most 500 sweeps), so the result is a fixed point of the
/// procedure and normalizing twice changes nothing.
pub fn normalize(frames: &Frames, trial_id: &str) -> Result<Frames, DatasetError> {
    if frames.len() < 2 {
        return Err(DatasetError::DegenerateTrial {
            trial: trial_id.to_string(),
            frames: frames.len(),
            required: 2,
        });
    }
    let mut current = standardize_frames(&standardize_features(frames));
    for _ in 1..MAX_SWEEPS {
        let next = standardize_frames(&standardize_features(&current));
        let change = next
            .data()
            .iter()
            .zip(current.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        current = next;
        if change < CONVERGENCE_TOL {
            break;
        }
    }
    Ok(current)
}
