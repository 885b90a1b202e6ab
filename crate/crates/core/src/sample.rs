//! In-memory samples. Pixels are `H x W x 3` floats in `[0, 1]`; change masks
//! are `H x W` with entries in `{0, 1}`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("image must be H x W x 3, got {0:?}")]
    BadChannels(Vec<usize>),
    #[error("bitemporal images differ in shape: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("change mask is {mask:?} but images are {image:?}")]
    MaskShape { mask: Vec<usize>, image: Vec<usize> },
    #[error("change mask contains a value other than 0 or 1")]
    NonBinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Classification,
    Bitemporal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Array3<f32>,
    pub label: usize,
}

impl ImageSample {
    pub fn new(pixels: Array3<f32>, label: usize) -> Result<Self, SampleError> {
        if pixels.dim().2 != 3 {
            return Err(SampleError::BadChannels(pixels.shape().to_vec()));
        }
        Ok(Self { pixels, label })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitemporalSample {
    pub pixels_a: Array3<f32>,
    pub pixels_b: Array3<f32>,
    pub change_mask: Array2<u8>,
}

impl BitemporalSample {
    pub fn new(
        pixels_a: Array3<f32>,
        pixels_b: Array3<f32>,
        change_mask: Array2<u8>,
    ) -> Result<Self, SampleError> {
        if pixels_a.dim().2 != 3 {
            return Err(SampleError::BadChannels(pixels_a.shape().to_vec()));
        }
        if pixels_a.dim() != pixels_b.dim() {
            return Err(SampleError::ShapeMismatch {
                a: pixels_a.shape().to_vec(),
                b: pixels_b.shape().to_vec(),
            });
        }
        let (h, w, _) = pixels_a.dim();
        if change_mask.dim() != (h, w) {
            return Err(SampleError::MaskShape {
                mask: change_mask.shape().to_vec(),
                image: pixels_a.shape().to_vec(),
            });
        }
        if change_mask.iter().any(|&v| v > 1) {
            return Err(SampleError::NonBinaryMask);
        }
        Ok(Self {
            pixels_a,
            pixels_b,
            change_mask,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Image(ImageSample),
    Bitemporal(BitemporalSample),
}

impl Sample {
    pub fn kind(&self) -> SampleKind {
        match self {
            Sample::Image(_) => SampleKind::Classification,
            Sample::Bitemporal(_) => SampleKind::Bitemporal,
        }
    }

    /// Spatial size `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = match self {
            Sample::Image(s) => s.pixels.dim(),
            Sample::Bitemporal(s) => s.pixels_a.dim(),
        };
        (h, w)
    }
}

impl From<ImageSample> for Sample {
    fn from(s: ImageSample) -> Self {
        Sample::Image(s)
    }
}

impl From<BitemporalSample> for Sample {
    fn from(s: BitemporalSample) -> Self {
        Sample::Bitemporal(s)
    }
}
