//! Trial-level augmentation: additive Gaussian noise and time reversal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::Frames;

/// What was applied to one trial in one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentRecord {
    pub noise: bool,
    pub flipped: bool,
}

/// Reverses the frame order.
pub fn flip(frames: &Frames) -> Frames {
    frames.reversed()
}

/// Adds zero-mean noise whose per-feature std is `scale` times the trial's own std for that feature.
pub fn add_noise(frames: &Frames, scale: f64, rng: &mut ChaCha8Rng) -> Frames {
    let std = frames.column_std();
    let width = frames.width();
    let mut out = frames.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        *v += scale * std[i % width] * z;
    }
    out
}

/// Applies noise and flip independently, each with probability `rate`.
///
/// Both coin flips are always drawn so the random stream does not depend on
/// earlier outcomes.
pub fn augment(frames: &Frames, rate: f64, noise_scale: f64, rng: &mut ChaCha8Rng) -> (Frames, AugmentRecord) {
    let record = AugmentRecord {
        noise: rng.random::<f64>() < rate,
        flipped: rng.random::<f64>() < rate,
    };
    let mut out = if record.noise {
        add_noise(frames, noise_scale, rng)
    } else {
        frames.clone()
    };
    if record.flipped {
        out = flip(&out);
    }
    (out, record)
}
