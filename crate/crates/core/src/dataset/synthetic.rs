//! Deterministic synthetic data standing in for the real benchmark datasets.
//!
//! A change-detection pair shares one textured background. Image A carries a
//! set of non-overlapping "buildings" (rectangles and ellipses); image B
//! starts from the same set, removes and adds a few, and receives a mild
//! photometric jitter. Shapes never overlap, including across the two
//! images, so the change mask is exactly the symmetric difference of the two
//! shape rasters and an oracle can reach F1 = 100.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sample::{BitemporalSample, ImageSample};

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("synthetic images need side >= 32, got {0}")]
    TooSmall(usize),
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    /// Pixels `x0 <= col < x0 + w`, `y0 <= row < y0 + h`.
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    /// Pixels whose center lies in the closed ellipse.
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: [f32; 3],
}

impl Shape {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        match self.kind {
            ShapeKind::Rect { x0, y0, w, h } => {
                col >= x0 && col < x0 + w && row >= y0 && row < y0 + h
            }
            ShapeKind::Ellipse { cx, cy, rx, ry } => {
                let dx = (col as f64 + 0.5 - cx) / rx;
                let dy = (row as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    /// Integer bounding box `(x0, y0, x1, y1)`, exclusive upper corner.
    fn bounds(&self) -> (isize, isize, isize, isize) {
        match self.kind {
            ShapeKind::Rect { x0, y0, w, h } => {
                (x0 as isize, y0 as isize, (x0 + w) as isize, (y0 + h) as isize)
            }
            ShapeKind::Ellipse { cx, cy, rx, ry } => (
                (cx - rx).floor() as isize,
                (cy - ry).floor() as isize,
                (cx + rx).ceil() as isize,
                (cy + ry).ceil() as isize,
            ),
        }
    }

    fn separated_from(&self, other: &Shape, margin: isize) -> bool {
        let a = self.bounds();
        let b = other.bounds();
        a.2 + margin <= b.0 || b.2 + margin <= a.0 || a.3 + margin <= b.1 || b.3 + margin <= a.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub side: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_edits: usize,
    pub max_edits: usize,
    pub min_rect_side: usize,
    pub max_rect_side: usize,
    /// Amplitude of the fine per-pixel texture shared by both images.
    pub texture: f32,
    /// Relative gain jitter applied to image B.
    pub gain_jitter: f32,
    /// Additive offset jitter applied to image B.
    pub offset_jitter: f32,
    /// Amplitude of independent uniform noise added to image B.
    pub noise: f32,
}

impl SyntheticConfig {
    pub fn with_side(side: usize) -> Self {
        let scale = side as f64 / 64.0;
        let px = |v: f64| ((v * scale).round() as usize).max(2);
        Self {
            side,
            min_shapes: 2,
            max_shapes: 5,
            min_edits: 1,
            max_edits: 3,
            min_rect_side: px(9.0),
            max_rect_side: px(20.0),
            texture: 0.08,
            gain_jitter: 0.06,
            offset_jitter: 0.03,
            noise: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.side < 32 {
            return Err(SyntheticError::TooSmall(self.side));
        }
        let bad = |m: &str| Err(SyntheticError::Invalid(m.into()));
        if self.min_shapes > self.max_shapes || self.min_edits > self.max_edits {
            return bad("min counts exceed max counts");
        }
        if self.min_rect_side < 2 || self.min_rect_side > self.max_rect_side {
            return bad("rectangle side range is empty");
        }
        if 2 * self.max_rect_side > self.side {
            return bad("shapes are too large for the image");
        }
        Ok(())
    }
}

/// A generated pair together with the shape lists that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub sample: BitemporalSample,
    pub shapes_a: Vec<Shape>,
    pub shapes_b: Vec<Shape>,
}

fn background(side: usize, texture: f32, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let base: [f32; 3] = [
        rng.random_range(0.35..0.55),
        rng.random_range(0.35..0.55),
        rng.random_range(0.3..0.5),
    ];
    let waves: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            let fx = rng.random_range(-0.15..0.15);
            let fy = rng.random_range(-0.15..0.15);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = [
                rng.random_range(0.0..0.07),
                rng.random_range(0.0..0.07),
                rng.random_range(0.0..0.07),
            ];
            (fx, fy, phase, amp)
        })
        .collect();
    let grain: Vec<f32> = (0..side * side)
        .map(|_| rng.random_range(-texture..=texture))
        .collect();
    Array3::from_shape_fn((side, side, 3), |(i, j, c)| {
        let mut v = base[c] + grain[i * side + j];
        for (fx, fy, phase, amp) in &waves {
            v += amp[c] * (fx * j as f32 + fy * i as f32 + phase).cos();
        }
        v.clamp(0.0, 1.0)
    })
}

fn random_shape(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Shape {
    let side = cfg.side;
    let bright = rng.random_bool(0.5);
    let level = if bright {
        rng.random_range(0.7..0.95)
    } else {
        rng.random_range(0.05..0.25)
    };
    let color = [
        (level + rng.random_range(-0.06..0.06f32)).clamp(0.0, 1.0),
        (level + rng.random_range(-0.06..0.06f32)).clamp(0.0, 1.0),
        (level + rng.random_range(-0.06..0.06f32)).clamp(0.0, 1.0),
    ];
    let kind = if rng.random_bool(0.6) {
        let w = rng.random_range(cfg.min_rect_side..=cfg.max_rect_side);
        let h = rng.random_range(cfg.min_rect_side..=cfg.max_rect_side);
        ShapeKind::Rect {
            x0: rng.random_range(1..side - w),
            y0: rng.random_range(1..side - h),
            w,
            h,
        }
    } else {
        let rmin = cfg.min_rect_side as f64 / 2.0;
        let rmax = cfg.max_rect_side as f64 / 2.0;
        let rx = rng.random_range(rmin..=rmax);
        let ry = rng.random_range(rmin..=rmax);
        ShapeKind::Ellipse {
            cx: rng.random_range(rx + 1.0..side as f64 - rx - 1.0),
            cy: rng.random_range(ry + 1.0..side as f64 - ry - 1.0),
            rx,
            ry,
        }
    };
    Shape { kind, color }
}

/// Draws a shape that keeps a 2-pixel gap to every shape in `avoid`.
fn place_shape(cfg: &SyntheticConfig, avoid: &[Shape], rng: &mut ChaCha8Rng) -> Option<Shape> {
    (0..64)
        .map(|_| random_shape(cfg, rng))
        .find(|s| avoid.iter().all(|o| s.separated_from(o, 2)))
}

/// Union raster of a shape list.
pub fn rasterize_shapes(shapes: &[Shape], side: usize) -> Array2<u8> {
    let mut out = Array2::<u8>::zeros((side, side));
    for s in shapes {
        let (x0, y0, x1, y1) = s.bounds();
        let clip = |v: isize| v.clamp(0, side as isize) as usize;
        for r in clip(y0)..clip(y1) {
            for c in clip(x0)..clip(x1) {
                if s.contains(r, c) {
                    out[[r, c]] = 1;
                }
            }
        }
    }
    out
}

fn paint(canvas: &mut Array3<f32>, shapes: &[Shape], texture: &Array3<f32>) {
    let side = canvas.dim().0;
    for s in shapes {
        let (x0, y0, x1, y1) = s.bounds();
        let clip = |v: isize| v.clamp(0, side as isize) as usize;
        for r in clip(y0)..clip(y1) {
            for c in clip(x0)..clip(x1) {
                if s.contains(r, c) {
                    for ch in 0..3 {
                        // Roofs keep a faint copy of the ground grain.
                        canvas[[r, c, ch]] =
                            (s.color[ch] + 0.4 * texture[[r, c, ch]]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

/// Generates one pair from the running generator state.
pub fn generate_pair(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> SyntheticPair {
    let side = cfg.side;
    let ground = background(side, cfg.texture, rng);
    let grain = ground.mapv(|v| v - 0.45);

    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes_a: Vec<Shape> = Vec::with_capacity(n);
    for _ in 0..n {
        if let Some(s) = place_shape(cfg, &shapes_a, rng) {
            shapes_a.push(s);
        }
    }

    let mut shapes_b = shapes_a.clone();
    let mut every: Vec<Shape> = shapes_a.clone();
    let edits = rng.random_range(cfg.min_edits..=cfg.max_edits);
    for _ in 0..edits {
        if !shapes_b.is_empty() && rng.random_bool(0.5) {
            let i = rng.random_range(0..shapes_b.len());
            shapes_b.remove(i);
        } else if let Some(s) = place_shape(cfg, &every, rng) {
            every.push(s);
            shapes_b.push(s);
        }
    }

    let mut pixels_a = ground.clone();
    paint(&mut pixels_a, &shapes_a, &grain);
    let mut pixels_b = ground;
    paint(&mut pixels_b, &shapes_b, &grain);
    let gain = 1.0 + rng.random_range(-cfg.gain_jitter..=cfg.gain_jitter);
    let offset: [f32; 3] = [
        rng.random_range(-cfg.offset_jitter..=cfg.offset_jitter),
        rng.random_range(-cfg.offset_jitter..=cfg.offset_jitter),
        rng.random_range(-cfg.offset_jitter..=cfg.offset_jitter),
    ];
    for ((_, _, ch), v) in pixels_b.indexed_iter_mut() {
        let noise = rng.random_range(-cfg.noise..=cfg.noise);
        *v = (*v * gain + offset[ch] + noise).clamp(0.0, 1.0);
    }

    let ra = rasterize_shapes(&shapes_a, side);
    let rb = rasterize_shapes(&shapes_b, side);
    let change_mask = ndarray::Zip::from(&ra).and(&rb).map_collect(|&a, &b| a ^ b);
    SyntheticPair {
        sample: BitemporalSample::new(pixels_a, pixels_b, change_mask)
            .expect("generator produces consistent shapes"),
        shapes_a,
        shapes_b,
    }
}

pub fn generate_pairs(
    n_pairs: usize,
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<Vec<SyntheticPair>, SyntheticError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_pairs).map(|_| generate_pair(cfg, &mut rng)).collect())
}

/// `n_pairs` bitemporal samples of `side x side` pixels, identical for
/// identical arguments.
pub fn make_synthetic_cd_fixture(
    n_pairs: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<BitemporalSample>, SyntheticError> {
    Ok(generate_pairs(n_pairs, &SyntheticConfig::with_side(side), seed)?
        .into_iter()
        .map(|p| p.sample)
        .collect())
}

/// Unlabeled single images with the same visual statistics, for pretraining.
pub fn make_synthetic_scenes(
    n: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<Array3<f32>>, SyntheticError> {
    Ok(generate_pairs(n, &SyntheticConfig::with_side(side), seed)?
        .into_iter()
        .map(|p| p.sample.pixels_a)
        .collect())
}

/// Scene-classification stand-in: class `c` is an oriented stripe texture
/// whose period grows with `c`, so fine classes blur together first.
pub fn make_synthetic_cls_fixture(
    n: usize,
    side: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<ImageSample>, SyntheticError> {
    if side < 32 {
        return Err(SyntheticError::TooSmall(side));
    }
    if n_classes < 2 {
        return Err(SyntheticError::Invalid("need at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let label = i % n_classes;
            let angle = std::f32::consts::PI * label as f32 / n_classes as f32
                + rng.random_range(-0.1..0.1);
            let period = 2.5 + 1.5 * label as f32;
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let base: [f32; 3] = [
                rng.random_range(0.3..0.6),
                rng.random_range(0.3..0.6),
                rng.random_range(0.3..0.6),
            ];
            let (sa, ca) = angle.sin_cos();
            let pixels = Array3::from_shape_fn((side, side, 3), |(r, c, ch)| {
                let t = (c as f32 * ca + r as f32 * sa) * std::f32::consts::TAU / period;
                (base[ch] + 0.25 * (t + phase).sin()).clamp(0.0, 1.0)
            });
            let mut pixels = pixels;
            pixels.mapv_inplace(|v| (v + rng.random_range(-0.03..0.03f32)).clamp(0.0, 1.0));
            ImageSample { pixels, label }
        })
        .collect())
}
