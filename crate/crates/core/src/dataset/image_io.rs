//! PNG/JPEG/TIFF decoding to `[0, 1]` floats and lossless PNG export.

use std::path::Path;

use image::{GrayImage, ImageBuffer, ImageReader, Rgb};
use ndarray::{Array2, Array3};

use super::DatasetError;

fn open(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    ImageReader::open(path)
        .map_err(|e| DatasetError::unreadable(path, e))?
        .with_guessed_format()
        .map_err(|e| DatasetError::unreadable(path, e))?
        .decode()
        .map_err(|e| DatasetError::unreadable(path, e))
}

/// Decodes any supported image as `H x W x 3` floats in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Array3<f32>, DatasetError> {
    let img = open(path)?.to_rgb32f();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| DatasetError::unreadable(path, e))
}

/// Decodes a label image and binarizes it: gray level `>= 0.5` is change.
pub fn read_mask(path: &Path) -> Result<Array2<u8>, DatasetError> {
    let img = open(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| u8::from(v >= 0.5)).collect();
    Array2::from_shape_vec((h as usize, w as usize), data)
        .map_err(|e| DatasetError::unreadable(path, e))
}

/// `(width, height)` from the file header without decoding pixels.
pub fn dimensions(path: &Path) -> Result<(u32, u32), DatasetError> {
    image::image_dimensions(path).map_err(|e| DatasetError::unreadable(path, e))
}

/// Writes a 16-bit RGB PNG (quantization step 1/65535).
pub fn write_rgb_png(path: &Path, pixels: &Array3<f32>) -> Result<(), DatasetError> {
    let (h, w, _) = pixels.dim();
    let raw: Vec<u16> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Rgb<u16>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save(path).map_err(|e| DatasetError::write(path, e))
}

/// Writes a binary mask as 0/255 gray levels.
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<(), DatasetError> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save(path).map_err(|e| DatasetError::write(path, e))
}
