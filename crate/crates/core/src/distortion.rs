//! Resolution degradation: downscale by an integer factor, then upscale back
//! to the original size. Pixel count is preserved, detail is not.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resample::{resize, ResampleKernel};
use crate::sample::{BitemporalSample, ImageSample, Sample, SampleKind};

#[derive(Debug, Error, PartialEq)]
pub enum DistortionError {
    #[error("scale factor must be at least 1, got {0}")]
    InvalidFactor(u32),
    #[error("scale factor {factor} would collapse a {h}x{w} image below one pixel")]
    FactorTooLarge { factor: u32, h: usize, w: usize },
    #[error("distortion factors must be ascending, unique and start at 1, got {0:?}")]
    BadFactorList(Vec<u32>),
    #[error("second-image distortion needs a bitemporal sample")]
    TargetMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionTarget {
    WholeImage,
    SecondImageOnly,
}

impl DistortionTarget {
    /// The protocol's target for a task: whole image for classification,
    /// second image only for change detection.
    pub fn for_kind(kind: SampleKind) -> Self {
        match kind {
            SampleKind::Classification => DistortionTarget::WholeImage,
            SampleKind::Bitemporal => DistortionTarget::SecondImageOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionSpec {
    pub factors: Vec<u32>,
    pub target: DistortionTarget,
    #[serde(default)]
    pub kernel: ResampleKernel,
}

pub const DEFAULT_FACTORS: [u32; 4] = [1, 2, 4, 8];

impl DistortionSpec {
    pub fn new(factors: Vec<u32>, target: DistortionTarget) -> Result<Self, DistortionError> {
        let spec = Self {
            factors,
            target,
            kernel: ResampleKernel::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_for(kind: SampleKind) -> Self {
        Self {
            factors: DEFAULT_FACTORS.to_vec(),
            target: DistortionTarget::for_kind(kind),
            kernel: ResampleKernel::default(),
        }
    }

    pub fn with_kernel(mut self, kernel: ResampleKernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn validate(&self) -> Result<(), DistortionError> {
        let ok = self.factors.first() == Some(&1)
            && self.factors.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(DistortionError::BadFactorList(self.factors.clone()))
        }
    }

    pub fn check_kind(&self, kind: SampleKind) -> Result<(), DistortionError> {
        if self.target == DistortionTarget::SecondImageOnly && kind != SampleKind::Bitemporal {
            return Err(DistortionError::TargetMismatch);
        }
        Ok(())
    }
}

/// Intermediate size `round(len / k)` with halves rounded up.
fn reduced_len(len: usize, k: u32) -> usize {
    let k = k as usize;
    (2 * len + k) / (2 * k)
}

/// Degrades `image` by factor `k` with the default kernel.
pub fn distort(image: &Array3<f32>, k: u32) -> Result<Array3<f32>, DistortionError> {
    distort_with(image, k, ResampleKernel::default())
}

pub fn distort_with(
    image: &Array3<f32>,
    k: u32,
    kernel: ResampleKernel,
) -> Result<Array3<f32>, DistortionError> {
    if k == 0 {
        return Err(DistortionError::InvalidFactor(k));
    }
    if k == 1 {
        return Ok(image.clone());
    }
    let (h, w, _) = image.dim();
    if k as usize >= h.min(w) {
        return Err(DistortionError::FactorTooLarge { factor: k, h, w });
    }
    let small = resize(image.view(), reduced_len(h, k), reduced_len(w, k), kernel);
    let mut out = resize(small.view(), h, w, kernel);
    // Convex weights already bound the result; clamp absorbs rounding.
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Applies factor `k` to the image(s) selected by `target`. Labels and
/// change masks are carried over untouched.
pub fn distort_sample(
    sample: &Sample,
    k: u32,
    target: DistortionTarget,
    kernel: ResampleKernel,
) -> Result<Sample, DistortionError> {
    match (sample, target) {
        (Sample::Image(s), DistortionTarget::WholeImage) => Ok(Sample::Image(ImageSample {
            pixels: distort_with(&s.pixels, k, kernel)?,
            label: s.label,
        })),
        (Sample::Image(_), DistortionTarget::SecondImageOnly) => {
            Err(DistortionError::TargetMismatch)
        }
        (Sample::Bitemporal(s), DistortionTarget::WholeImage) => {
            Ok(Sample::Bitemporal(BitemporalSample {
                pixels_a: distort_with(&s.pixels_a, k, kernel)?,
                pixels_b: distort_with(&s.pixels_b, k, kernel)?,
                change_mask: s.change_mask.clone(),
            }))
        }
        (Sample::Bitemporal(s), DistortionTarget::SecondImageOnly) => {
            Ok(Sample::Bitemporal(BitemporalSample {
                pixels_a: s.pixels_a.clone(),
                pixels_b: distort_with(&s.pixels_b, k, kernel)?,
                change_mask: s.change_mask.clone(),
            }))
        }
    }
}

/// One degraded copy of `sample` per factor in `spec`, in factor order.
pub fn build_eval_variants(
    sample: &Sample,
    spec: &DistortionSpec,
) -> Result<Vec<(u32, Sample)>, DistortionError> {
    spec.validate()?;
    spec.check_kind(sample.kind())?;
    spec.factors
        .iter()
        .map(|&k| Ok((k, distort_sample(sample, k, spec.target, spec.kernel)?)))
        .collect()
}
