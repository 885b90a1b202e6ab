//! Separable image resampling.
//!
//! Every kernel is expressed as a [`Taps`] table: for each output index, a
//! short list of `(source index, weight)` pairs whose weights are
//! non-negative and sum to one. Resizing is then a convex combination along
//! each axis, which keeps values inside the input range and maps constant
//! images to themselves.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

/// Interpolation kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleKernel {
    /// Triangle filter whose support widens with the downscale factor
    /// (area-aware, as in PIL's `BILINEAR`). Plain bilinear when upsampling.
    #[default]
    Bilinear,
    /// Two-tap bilinear with half-pixel centers and no prefiltering, the
    /// `align_corners = false` convention of most tensor libraries.
    BilinearNoAntialias,
}

/// Per-output-index interpolation weights along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    in_len: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f32>,
}

impl Taps {
    pub fn new(in_len: usize, out_len: usize, kernel: ResampleKernel) -> Self {
        assert!(in_len > 0 && out_len > 0, "resample lengths must be positive");
        let mut taps = Taps {
            in_len,
            offsets: Vec::with_capacity(out_len + 1),
            indices: Vec::new(),
            weights: Vec::new(),
        };
        taps.offsets.push(0);
        let scale = in_len as f64 / out_len as f64;
        for o in 0..out_len {
            match kernel {
                ResampleKernel::Bilinear => taps.push_triangle(o, scale),
                ResampleKernel::BilinearNoAntialias => taps.push_two_tap(o, scale),
            }
            taps.offsets.push(taps.indices.len());
        }
        taps
    }

    fn push_triangle(&mut self, o: usize, scale: f64) {
        let filter_scale = scale.max(1.0);
        let support = filter_scale;
        let center = (o as f64 + 0.5) * scale;
        let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
        let hi = ((center + support + 0.5).floor() as usize).min(self.in_len);
        let start = self.indices.len();
        let mut total = 0.0f64;
        let mut raw = Vec::with_capacity(hi.saturating_sub(lo));
        for i in lo..hi {
            let t = ((i as f64 + 0.5 - center) / filter_scale).abs();
            let w = (1.0 - t).max(0.0);
            if w > 0.0 {
                raw.push((i, w));
                total += w;
            }
        }
        if raw.is_empty() {
            // Only reachable through rounding at the borders.
            let i = (center.floor() as usize).min(self.in_len - 1);
            raw.push((i, 1.0));
            total = 1.0;
        }
        for (i, w) in raw {
            self.indices.push(i);
            self.weights.push((w / total) as f32);
        }
        debug_assert!(self.indices.len() > start);
    }

    fn push_two_tap(&mut self, o: usize, scale: f64) {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(self.in_len - 1);
        let i1 = (i0 + 1).min(self.in_len - 1);
        let l1 = (src - i0 as f64) as f32;
        if i0 == i1 || l1 == 0.0 {
            self.indices.push(i0);
            self.weights.push(1.0);
        } else {
            self.indices.push(i0);
            self.weights.push(1.0 - l1);
            self.indices.push(i1);
            self.weights.push(l1);
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `(source index, weight)` pairs contributing to output index `o`.
    pub fn get(&self, o: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let r = self.offsets[o]..self.offsets[o + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }
}

/// Resizes an `H x W x C` image to `out_h x out_w` (rows first, then
/// columns). Same-size requests return an exact copy.
pub fn resize(
    image: ArrayView3<f32>,
    out_h: usize,
    out_w: usize,
    kernel: ResampleKernel,
) -> Array3<f32> {
    let (h, w, c) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.to_owned();
    }
    let rows = Taps::new(h, out_h, kernel);
    let cols = Taps::new(w, out_w, kernel);

    let mut tmp = Array3::<f32>::zeros((out_h, w, c));
    for o in 0..out_h {
        for (i, wt) in rows.get(o) {
            let src = image.index_axis(ndarray::Axis(0), i);
            let mut dst = tmp.index_axis_mut(ndarray::Axis(0), o);
            dst.scaled_add(wt, &src);
        }
    }
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for o in 0..out_w {
        for (j, wt) in cols.get(o) {
            let src = tmp.index_axis(ndarray::Axis(1), j);
            let mut dst = out.index_axis_mut(ndarray::Axis(1), o);
            dst.scaled_add(wt, &src);
        }
    }
    out
}
