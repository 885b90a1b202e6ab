//! Crop rectangles in a shared source frame, point mapping between crop
//! frames, and rasterization of the overlap target used by the pretraining
//! mask decoder.
//!
//! A [`CropBox`] records where a crop was taken from (in source pixels), the
//! side of the square output it was resized to, and whether the output was
//! mirrored horizontally. The flip is applied after the affine map, so the
//! mapping of a source point `p` into the crop's output frame is
//!
//! ```text
//! u = (p.x - x) * out_size / w      (u <- out_size - u when flipped)
//! v = (p.y - y) * out_size / h
//! ```

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("crop extent must be positive and finite, got w={w}, h={h}")]
    NonPositiveExtent { w: f64, h: f64 },
    #[error("crop origin must be finite, got ({x}, {y})")]
    NonFiniteOrigin { x: f64, y: f64 },
    #[error("crop output size must be positive")]
    ZeroOutputSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle in source pixels, `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Geometry of one crop: source rectangle, square output side and flip flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCropBox")]
pub struct CropBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    out_size: usize,
    hflip: bool,
}

#[derive(Deserialize)]
struct RawCropBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    out_size: usize,
    hflip: bool,
}

impl TryFrom<RawCropBox> for CropBox {
    type Error = GeometryError;

    fn try_from(raw: RawCropBox) -> Result<Self, Self::Error> {
        CropBox::new(raw.x, raw.y, raw.w, raw.h, raw.out_size, raw.hflip)
    }
}

impl CropBox {
    pub fn new(
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        out_size: usize,
        hflip: bool,
    ) -> Result<Self, GeometryError> {
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(GeometryError::NonPositiveExtent { w, h });
        }
        if !(x.is_finite() && y.is_finite()) {
            return Err(GeometryError::NonFiniteOrigin { x, y });
        }
        if out_size == 0 {
            return Err(GeometryError::ZeroOutputSize);
        }
        Ok(Self {
            x,
            y,
            w,
            h,
            out_size,
            hflip,
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn out_size(&self) -> usize {
        self.out_size
    }
    pub fn hflip(&self) -> bool {
        self.hflip
    }

    pub fn rect(&self) -> Rect {
        Rect {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
        }
    }

    pub fn with_hflip(mut self, hflip: bool) -> Self {
        self.hflip = hflip;
        self
    }
}

/// Intersection of the two source rectangles; `None` when the overlap has
/// zero area (disjoint or merely touching).
pub fn overlap_rect(a: &CropBox, b: &CropBox) -> Option<Rect> {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    if x1 > x0 && y1 > y0 {
        Some(Rect {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    } else {
        None
    }
}

/// Maps a source-frame point into the output frame of `c`.
pub fn map_point_to_crop(p: Point, c: &CropBox) -> Point {
    let s = c.out_size as f64;
    let mut u = (p.x - c.x) * s / c.w;
    let v = (p.y - c.y) * s / c.h;
    if c.hflip {
        u = s - u;
    }
    Point::new(u, v)
}

/// Inverse of [`map_point_to_crop`].
pub fn map_point_from_crop(p: Point, c: &CropBox) -> Point {
    let s = c.out_size as f64;
    let u = if c.hflip { s - p.x } else { p.x };
    Point::new(c.x + u * c.w / s, c.y + p.y * c.h / s)
}

/// Maps a point expressed in `from`'s output frame into `to`'s output frame.
pub fn map_between_crops(p: Point, from: &CropBox, to: &CropBox) -> Point {
    map_point_to_crop(map_point_from_crop(p, from), to)
}

/// Binary target in the first crop's output frame: which output pixels of
/// `c1` show source content that is also inside `c2`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMask {
    pub grid: Array2<u8>,
    pub coverage_fraction: f64,
}

/// A pixel `(i, j)` of `c1` is set when the source position of its center
/// lies strictly inside `c2`'s source rectangle. Rows and columns map
/// independently, so the grid is the outer AND of two membership vectors.
pub fn rasterize_overlap_mask(c1: &CropBox, c2: &CropBox) -> OverlapMask {
    let n = c1.out_size;
    let s = n as f64;
    let inside_x = |sx: f64| sx > c2.x && sx < c2.x + c2.w;
    let inside_y = |sy: f64| sy > c2.y && sy < c2.y + c2.h;
    let cols: Vec<bool> = (0..n)
        .map(|j| {
            let u = j as f64 + 0.5;
            let u = if c1.hflip { s - u } else { u };
            inside_x(c1.x + u * c1.w / s)
        })
        .collect();
    let rows: Vec<bool> = (0..n)
        .map(|i| inside_y(c1.y + (i as f64 + 0.5) * c1.h / s))
        .collect();
    let grid = Array2::from_shape_fn((n, n), |(i, j)| u8::from(rows[i] && cols[j]));
    let ones = rows.iter().filter(|&&r| r).count() * cols.iter().filter(|&&c| c).count();
    OverlapMask {
        grid,
        coverage_fraction: ones as f64 / (n * n) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64, out: usize, flip: bool) -> CropBox {
        CropBox::new(x, y, w, h, out, flip).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(CropBox::new(0.0, 0.0, 0.0, 4.0, 4, false).is_err());
        assert!(CropBox::new(0.0, 0.0, 4.0, -1.0, 4, false).is_err());
        assert_eq!(
            CropBox::new(0.0, 0.0, 4.0, 4.0, 0, false),
            Err(GeometryError::ZeroOutputSize)
        );
        assert!(CropBox::new(f64::NAN, 0.0, 4.0, 4.0, 4, false).is_err());
    }

    #[test]
    fn deserialization_enforces_invariants() {
        let bad = r#"{"x":0,"y":0,"w":0,"h":3,"out_size":3,"hflip":false}"#;
        assert!(serde_json::from_str::<CropBox>(bad).is_err());
        let good = r#"{"x":1,"y":2,"w":3,"h":3,"out_size":3,"hflip":true}"#;
        let c: CropBox = serde_json::from_str(good).unwrap();
        assert!(c.hflip());
    }

    #[test]
    fn overlap_examples() {
        let a = bx(0.0, 0.0, 100.0, 100.0, 10, false);
        let b = bx(50.0, 50.0, 100.0, 100.0, 10, false);
        assert_eq!(
            overlap_rect(&a, &b),
            Some(Rect { x: 50.0, y: 50.0, w: 50.0, h: 50.0 })
        );
        let c = bx(10.0, 20.0, 64.0, 64.0, 64, false);
        assert_eq!(overlap_rect(&c, &c), Some(c.rect()));
        let d = bx(0.0, 0.0, 10.0, 10.0, 10, false);
        let e = bx(20.0, 20.0, 5.0, 5.0, 5, false);
        assert_eq!(overlap_rect(&d, &e), None);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        let a = bx(0.0, 0.0, 10.0, 10.0, 10, false);
        let b = bx(10.0, 0.0, 10.0, 10.0, 10, false);
        assert_eq!(overlap_rect(&a, &b), None);
        assert_eq!(rasterize_overlap_mask(&a, &b).coverage_fraction, 0.0);
    }

    #[test]
    fn point_mapping_examples() {
        let c = bx(0.0, 0.0, 100.0, 100.0, 50, false);
        assert_eq!(map_point_to_crop(Point::new(40.0, 40.0), &c), Point::new(20.0, 20.0));
        let c = bx(0.0, 0.0, 64.0, 64.0, 64, false);
        assert_eq!(map_point_to_crop(Point::new(0.0, 0.0), &c), Point::new(0.0, 0.0));
    }

    #[test]
    fn flipped_mapping_matches_pixel_permutation() {
        // Flipping a 64-wide crop sends output column j to column 63 - j. The
        // left edge of source pixel 10 therefore lands on the right edge of
        // output pixel 53, i.e. u = 54.
        let c = bx(0.0, 0.0, 64.0, 64.0, 64, true);
        let p = map_point_to_crop(Point::new(10.0, 0.0), &c);
        assert_eq!(p, Point::new(54.0, 0.0));

        let perm: Vec<usize> = (0..64).map(|j| 63 - j).collect();
        for src in 0..64usize {
            let center = map_point_to_crop(Point::new(src as f64 + 0.5, 0.0), &c);
            assert_eq!(center.x.floor() as usize, perm[src]);
        }
    }

    #[test]
    fn identical_crops_give_full_mask() {
        let c = bx(5.0, 7.0, 40.0, 30.0, 16, true);
        let m = rasterize_overlap_mask(&c, &c);
        assert!(m.grid.iter().all(|&v| v == 1));
        assert_eq!(m.coverage_fraction, 1.0);
    }

    #[test]
    fn disjoint_crops_give_empty_mask() {
        let a = bx(0.0, 0.0, 10.0, 10.0, 8, false);
        let b = bx(30.0, 30.0, 10.0, 10.0, 8, false);
        let m = rasterize_overlap_mask(&a, &b);
        assert!(m.grid.iter().all(|&v| v == 0));
        assert_eq!(m.coverage_fraction, 0.0);
    }

    #[test]
    fn half_overlap_splits_columns() {
        let c1 = bx(0.0, 0.0, 64.0, 64.0, 64, false);
        let c2 = bx(32.0, 0.0, 64.0, 64.0, 64, false);
        let m = rasterize_overlap_mask(&c1, &c2);
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(m.grid[[i, j]], u8::from(j >= 32), "pixel ({i},{j})");
            }
        }
        assert_eq!(m.coverage_fraction, 0.5);

        // Mirroring crop 1 moves the covered half to the left.
        let m = rasterize_overlap_mask(&c1.with_hflip(true), &c2);
        assert!((0..64).all(|j| m.grid[[0, j]] == u8::from(j < 32)));
    }
}
