//! Scale augmentation for fine-tuning. The degradation is the evaluation
//! operator itself, so train-time and test-time distortion cannot drift.

use rand::Rng;
use scalebench_core::distortion::{distort_sample, DistortionError, DistortionTarget};
use scalebench_core::resample::ResampleKernel;
use scalebench_core::sample::Sample;

/// Factors drawn by default; `1` keeps clean images in the mix.
pub const FACTORS: [u32; 4] = [1, 2, 4, 8];
/// Strict mode: only actual degradations.
pub const STRICT_FACTORS: [u32; 3] = [2, 4, 8];

pub fn factor_set(strict: bool) -> &'static [u32] {
    if strict {
        &STRICT_FACTORS
    } else {
        &FACTORS
    }
}

pub fn draw_factor(strict: bool, rng: &mut impl Rng) -> u32 {
    let set = factor_set(strict);
    set[rng.random_range(0..set.len())]
}

/// Applies factor `k` the way the benchmark does: to the image of a
/// classification sample, or to the second image of a pair.
pub fn apply_factor(sample: &Sample, k: u32) -> Result<Sample, DistortionError> {
    distort_sample(sample, k, DistortionTarget::for_kind(sample.kind()), ResampleKernel::default())
}

/// Identity when `scale_aug` is off; otherwise one random factor per sample.
/// The RNG is only consumed when augmentation is on.
pub fn apply_train_augmentation(
    sample: &Sample,
    scale_aug: bool,
    strict: bool,
    rng: &mut impl Rng,
) -> Result<Sample, DistortionError> {
    if !scale_aug {
        return Ok(sample.clone());
    }
    apply_factor(sample, draw_factor(strict, rng))
}
