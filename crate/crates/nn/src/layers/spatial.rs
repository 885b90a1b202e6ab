//! Layers on `(batch, height, width, channels)` feature maps in standard
//! layout, so a map reshapes for free into a `(pixels, channels)` matrix.

use ndarray::{Array2, Array4, ArrayView2};
use rand::Rng;
use scalebench_core::resample::{ResampleKernel, Taps};

use super::linear::Linear;
use crate::param::{Init, ParamId, ParamStore};

pub fn rows(x: &Array4<f32>) -> ArrayView2<'_, f32> {
    let (b, h, w, c) = x.dim();
    x.view()
        .into_shape_with_order((b * h * w, c))
        .expect("feature maps are contiguous")
}

pub fn from_rows(x: Array2<f32>, b: usize, h: usize, w: usize) -> Array4<f32> {
    let c = x.ncols();
    let x = if x.is_standard_layout() { x } else { x.as_standard_layout().to_owned() };
    x.into_shape_with_order((b, h, w, c)).expect("row count matches map size")
}

fn kaiming(fan_in: usize) -> Init {
    Init::Uniform((6.0 / fan_in as f32).sqrt())
}

/// Pointwise convolution, a [`Linear`] applied at every pixel.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub lin: Linear,
}

impl Conv1x1 {
    pub fn new(s: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self { lin: Linear::with_init(s, name, cin, cout, true, kaiming(cin), rng) }
    }

    pub fn forward(&self, s: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let (b, h, w, _) = x.dim();
        from_rows(self.lin.forward(s, rows(x)), b, h, w)
    }

    pub fn backward(&self, s: &mut ParamStore, x: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
        let (b, h, w, _) = x.dim();
        from_rows(self.lin.backward(s, rows(x), rows(dy)), b, h, w)
    }
}

/// Unfolds 3x3 zero-padded neighborhoods: row `(b, y, x)`, column
/// `(ky * 3 + kx) * C + c`.
pub fn im2col3(x: &Array4<f32>) -> Array2<f32> {
    let (b, h, w, c) = x.dim();
    let src = x.as_slice().expect("contiguous input");
    let mut cols = Array2::<f32>::zeros((b * h * w, 9 * c));
    let dst = cols.as_slice_mut().expect("fresh array");
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let from = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let to = row + (ky * 3 + kx) * c;
                        dst[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: &Array2<f32>, dims: (usize, usize, usize, usize)) -> Array4<f32> {
    let (b, h, w, c) = dims;
    let src = cols.as_slice().expect("contiguous columns");
    let mut out = Array4::<f32>::zeros(dims);
    let dst = out.as_slice_mut().expect("fresh array");
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let to = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let from = row + (ky * 3 + kx) * c;
                        for (d, v) in dst[to..to + c].iter_mut().zip(&src[from..from + c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub lin: Linear,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3x3 {
    pub fn new(s: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            lin: Linear::with_init(s, name, 9 * cin, cout, true, kaiming(9 * cin), rng),
            cin,
            cout,
        }
    }

    /// Returns the output and the unfolded input needed by `backward`.
    pub fn forward(&self, s: &ParamStore, x: &Array4<f32>) -> (Array4<f32>, Array2<f32>) {
        let (b, h, w, c) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let cols = im2col3(x);
        (from_rows(self.lin.forward(s, cols.view()), b, h, w), cols)
    }

    pub fn backward(
        &self,
        s: &mut ParamStore,
        cols: &Array2<f32>,
        in_dims: (usize, usize, usize, usize),
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let dcols = self.lin.backward(s, cols.view(), rows(dy));
        col2im3(&dcols, in_dims)
    }

    pub fn backward_params(&self, s: &mut ParamStore, cols: &Array2<f32>, dy: &Array4<f32>) {
        self.lin.backward_params(s, cols.view(), rows(dy));
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub lin: Linear,
    pub bias: ParamId,
    pub cout: usize,
}

impl ConvTranspose2x2 {
    pub fn new(s: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            lin: Linear::with_init(s, name, cin, 4 * cout, false, kaiming(cin), rng),
            bias: s.add(&format!("{name}.bias"), &[cout], Init::Zeros, rng),
            cout,
        }
    }

    pub fn forward(&self, s: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let (b, h, w, _) = x.dim();
        let t = self.lin.forward(s, rows(x));
        let co = self.cout;
        let bias = s.v1(self.bias);
        let mut out = Array4::<f32>::zeros((b, 2 * h, 2 * w, co));
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let tr = t.row((bi * h + y) * w + xx);
                    for k in 0..4 {
                        let (dy, dx) = (k / 2, k % 2);
                        for c in 0..co {
                            out[[bi, 2 * y + dy, 2 * xx + dx, c]] = tr[k * co + c] + bias[c];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, s: &mut ParamStore, x: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
        let (b, h, w, _) = x.dim();
        let co = self.cout;
        let mut dt = Array2::<f32>::zeros((b * h * w, 4 * co));
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let mut tr = dt.row_mut((bi * h + y) * w + xx);
                    for k in 0..4 {
                        let (ky, kx) = (k / 2, k % 2);
                        for c in 0..co {
                            tr[k * co + c] = dy[[bi, 2 * y + ky, 2 * xx + kx, c]];
                        }
                    }
                }
            }
        }
        let db = rows(dy).sum_axis(ndarray::Axis(0));
        let mut gb = s.g1(self.bias);
        gb += &db;
        from_rows(self.lin.backward(s, rows(x), dt.view()), b, h, w)
    }
}

pub fn avg_pool2(x: &Array4<f32>) -> Array4<f32> {
    let (b, h, w, c) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even sides");
    Array4::from_shape_fn((b, h / 2, w / 2, c), |(bi, y, xx, ch)| {
        0.25 * (x[[bi, 2 * y, 2 * xx, ch]]
            + x[[bi, 2 * y + 1, 2 * xx, ch]]
            + x[[bi, 2 * y, 2 * xx + 1, ch]]
            + x[[bi, 2 * y + 1, 2 * xx + 1, ch]])
    })
}

pub fn avg_pool2_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (b, h, w, c) = dy.dim();
    Array4::from_shape_fn((b, 2 * h, 2 * w, c), |(bi, y, xx, ch)| 0.25 * dy[[bi, y / 2, xx / 2, ch]])
}

fn resize_axis1(x: &Array4<f32>, taps: &Taps, transpose: bool) -> Array4<f32> {
    let (b, in_h, w, c) = x.dim();
    let out_h = if transpose { taps.in_len() } else { taps.out_len() };
    let plane = w * c;
    let src = x.as_slice().expect("contiguous map");
    let mut out = Array4::<f32>::zeros((b, out_h, w, c));
    let dst = out.as_slice_mut().expect("fresh array");
    for bi in 0..b {
        for o in 0..taps.out_len() {
            for (i, wt) in taps.get(o) {
                let (from, to) = if transpose { (o, i) } else { (i, o) };
                let s0 = (bi * in_h + from) * plane;
                let d0 = (bi * out_h + to) * plane;
                for (d, v) in dst[d0..d0 + plane].iter_mut().zip(&src[s0..s0 + plane]) {
                    *d += wt * v;
                }
            }
        }
    }
    out
}

fn resize_axis2(x: &Array4<f32>, taps: &Taps, transpose: bool) -> Array4<f32> {
    let (b, h, w, c) = x.dim();
    let out_w = if transpose { taps.in_len() } else { taps.out_len() };
    let src = x.as_slice().expect("contiguous map");
    let mut out = Array4::<f32>::zeros((b, h, out_w, c));
    let dst = out.as_slice_mut().expect("fresh array");
    for r in 0..b * h {
        for o in 0..taps.out_len() {
            for (i, wt) in taps.get(o) {
                let (from, to) = if transpose { (o, i) } else { (i, o) };
                let s0 = (r * w + from) * c;
                let d0 = (r * out_w + to) * c;
                for (d, v) in dst[d0..d0 + c].iter_mut().zip(&src[s0..s0 + c]) {
                    *d += wt * v;
                }
            }
        }
    }
    out
}

/// Separable resize of every channel to `out_h x out_w`.
pub fn resize(x: &Array4<f32>, out_h: usize, out_w: usize, kernel: ResampleKernel) -> Array4<f32> {
    let (_, h, w, _) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let t = resize_axis1(x, &Taps::new(h, out_h, kernel), false);
    resize_axis2(&t, &Taps::new(w, out_w, kernel), false)
}

/// Adjoint of [`resize`] for an input of `in_h x in_w`.
pub fn resize_backward(dy: &Array4<f32>, in_h: usize, in_w: usize, kernel: ResampleKernel) -> Array4<f32> {
    let (_, oh, ow, _) = dy.dim();
    if (oh, ow) == (in_h, in_w) {
        return dy.clone();
    }
    let t = resize_axis2(dy, &Taps::new(in_w, ow, kernel), true);
    resize_axis1(&t, &Taps::new(in_h, oh, kernel), true)
}
