//! Multi-crop sampling for self-distillation pretraining. Every crop keeps
//! its exact source rectangle so overlap targets can be rasterized later.

use ndarray::{s, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use scalebench_core::geometry::CropBox;
use scalebench_core::resample::{resize, ResampleKernel};

#[derive(Debug, Error, PartialEq)]
pub enum CropError {
    #[error("image {h}x{w} is smaller than the {need}-pixel global crop")]
    ImageTooSmall { h: usize, w: usize, need: usize },
    #[error("invalid crop config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub n_global: usize,
    pub n_local: usize,
    /// Output side of global crops.
    pub global_size: usize,
    pub local_size: usize,
    /// Source side of global crops when scale augmentation is off.
    pub global_source: usize,
    pub local_source: usize,
    /// Area fraction range of random-resized global crops.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    /// Aspect-ratio range of random-resized crops.
    pub ratio: (f64, f64),
    pub flip_prob: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            n_global: 2,
            n_local: 8,
            global_size: 224,
            local_size: 96,
            global_source: 224,
            local_source: 96,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
        }
    }
}

impl CropConfig {
    /// Small crops for CPU runs on 64-pixel tiles.
    pub fn desk() -> Self {
        Self { global_size: 32, local_size: 16, global_source: 32, local_source: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CropError> {
        let bad = |m: &str| Err(CropError::Config(m.to_string()));
        if self.n_global < 2 {
            return bad("at least two global crops are needed for the overlap target");
        }
        if [self.global_size, self.local_size, self.global_source, self.local_source].contains(&0) {
            return bad("crop sides must be positive");
        }
        for (lo, hi) in [self.global_scale, self.local_scale] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad("scale ranges must satisfy 0 < lo <= hi <= 1");
            }
        }
        if !(self.ratio.0 > 0.0 && self.ratio.0 <= self.ratio.1) {
            return bad("ratio range must satisfy 0 < lo <= hi");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub pixels: Array3<f32>,
    pub bbox: CropBox,
}

/// Crops of one source image; the first global crop is the prediction frame
/// of the overlap branch.
#[derive(Debug, Clone, PartialEq)]
pub struct CropBatch {
    pub global: Vec<Crop>,
    pub local: Vec<Crop>,
}

impl CropBatch {
    pub fn boxes(&self) -> impl Iterator<Item = &CropBox> {
        self.global.iter().chain(&self.local).map(|c| &c.bbox)
    }
}

/// Integer source rectangle `(x, y, w, h)`.
type Rect = (usize, usize, usize, usize);

fn fixed_rect(h: usize, w: usize, side: usize, rng: &mut impl Rng) -> Rect {
    let side_h = side.min(h);
    let side_w = side.min(w);
    (rng.random_range(0..=w - side_w), rng.random_range(0..=h - side_h), side_w, side_h)
}

/// Area- and aspect-jittered rectangle, falling back to the largest centered
/// square after ten rejected draws.
fn random_resized_rect(h: usize, w: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut impl Rng) -> Rect {
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let r = if lr0 < lr1 { rng.random_range(lr0..lr1).exp() } else { ratio.0 };
        let cw = (target * r).sqrt().round() as usize;
        let ch = (target / r).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            return (rng.random_range(0..=w - cw), rng.random_range(0..=h - ch), cw, ch);
        }
    }
    let side = h.min(w);
    ((w - side) / 2, (h - side) / 2, side, side)
}

/// Cuts `rect` out of `image`, resizes it to `out x out` and mirrors it when
/// `hflip` is set, matching `map_point_to_crop` pixel for pixel.
pub fn render_crop(image: &Array3<f32>, rect: Rect, out: usize, hflip: bool) -> Crop {
    let (x, y, w, h) = rect;
    let view = image.slice(s![y..y + h, x..x + w, ..]);
    let mut pixels = resize(view, out, out, ResampleKernel::Bilinear);
    if hflip {
        pixels.invert_axis(Axis(1));
        pixels = pixels.as_standard_layout().to_owned();
    }
    let bbox = CropBox::new(x as f64, y as f64, w as f64, h as f64, out, hflip).expect("nonempty rectangle");
    Crop { pixels, bbox }
}

/// Two (or more) global and several local crops of `image`. Without scale
/// augmentation crops have a fixed source side and are resized only when
/// that side differs from the output side.
pub fn make_crops(
    image: &Array3<f32>,
    cfg: &CropConfig,
    scale_aug: bool,
    rng: &mut impl Rng,
) -> Result<CropBatch, CropError> {
    cfg.validate()?;
    let (h, w, _) = image.dim();
    let need = if scale_aug { cfg.global_size.min(cfg.global_source) } else { cfg.global_source };
    if h.min(w) < need {
        return Err(CropError::ImageTooSmall { h, w, need });
    }
    let mut draw = |n: usize, out: usize, source: usize, scale: (f64, f64)| -> Vec<Crop> {
        (0..n)
            .map(|_| {
                let rect = if scale_aug {
                    random_resized_rect(h, w, scale, cfg.ratio, rng)
                } else {
                    fixed_rect(h, w, source, rng)
                };
                let flip = rng.random_bool(cfg.flip_prob);
                render_crop(image, rect, out, flip)
            })
            .collect()
    };
    let global = draw(cfg.n_global, cfg.global_size, cfg.global_source, cfg.global_scale);
    let local = draw(cfg.n_local, cfg.local_size, cfg.local_source, cfg.local_scale);
    Ok(CropBatch { global, local })
}
