//! Multi-scale neck over a uniform ViT grid and a feature-pyramid mask
//! decoder producing per-pixel class logits.

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;
use scalebench_core::resample::ResampleKernel;
use scalebench_nn::layers::act::{relu, relu_backward};
use scalebench_nn::layers::spatial::{avg_pool2, avg_pool2_backward, resize, resize_backward};
use scalebench_nn::layers::{Conv1x1, Conv3x3, ConvTranspose2x2};
use scalebench_nn::ParamStore;

const KERNEL: ResampleKernel = ResampleKernel::BilinearNoAntialias;

/// Output stride of neck level `i`.
pub fn level_stride(i: usize) -> usize {
    4 << i
}

#[derive(Debug, Clone)]
enum Rescale {
    Up(Vec<ConvTranspose2x2>),
    Same,
    Down(usize),
}

#[derive(Debug, Clone)]
struct NeckLevel {
    proj: Conv1x1,
    rescale: Rescale,
}

/// One level per tap: a 1x1 projection followed by transposed convolutions
/// (finer strides), nothing (the patch stride) or 2x2 average pooling
/// (coarser strides), giving strides 4, 8, 16, 32, ...
#[derive(Debug, Clone)]
pub struct Neck {
    levels: Vec<NeckLevel>,
    pub in_channels: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct NeckCache {
    inputs: Vec<Array4<f32>>,
    /// Per level: the projection output and every transposed-conv output
    /// except the last.
    stages: Vec<Vec<Array4<f32>>>,
}

impl Neck {
    pub fn new(
        s: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        patch: usize,
        n_levels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(patch.is_power_of_two(), "neck needs a power-of-two patch size");
        let levels = (0..n_levels)
            .map(|i| {
                let stride = level_stride(i);
                let proj = Conv1x1::new(s, &format!("{prefix}.{i}.proj"), in_channels, channels, rng);
                let rescale = if stride < patch {
                    let n = (patch / stride).trailing_zeros() as usize;
                    Rescale::Up(
                        (0..n)
                            .map(|j| ConvTranspose2x2::new(s, &format!("{prefix}.{i}.up.{j}"), channels, channels, rng))
                            .collect(),
                    )
                } else if stride == patch {
                    Rescale::Same
                } else {
                    Rescale::Down((stride / patch).trailing_zeros() as usize)
                };
                NeckLevel { proj, rescale }
            })
            .collect();
        Self { levels, in_channels, channels }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn forward(&self, s: &ParamStore, feats: &[Array4<f32>]) -> (Vec<Array4<f32>>, NeckCache) {
        assert_eq!(feats.len(), self.levels.len(), "one feature map per neck level");
        let mut outs = Vec::with_capacity(feats.len());
        let mut stages = Vec::with_capacity(feats.len());
        for (lvl, x) in self.levels.iter().zip(feats) {
            let mut y = lvl.proj.forward(s, x);
            let mut st = Vec::new();
            match &lvl.rescale {
                Rescale::Up(ups) => {
                    for up in ups {
                        let next = up.forward(s, &y);
                        st.push(std::mem::replace(&mut y, next));
                    }
                }
                Rescale::Same => {}
                Rescale::Down(n) => {
                    for _ in 0..*n {
                        y = avg_pool2(&y);
                    }
                }
            }
            outs.push(y);
            stages.push(st);
        }
        (outs, NeckCache { inputs: feats.to_vec(), stages })
    }

    pub fn backward(&self, s: &mut ParamStore, c: &NeckCache, d_out: Vec<Array4<f32>>) -> Vec<Array4<f32>> {
        let mut d_in = Vec::with_capacity(d_out.len());
        for (i, (lvl, mut dy)) in self.levels.iter().zip(d_out).enumerate() {
            match &lvl.rescale {
                Rescale::Up(ups) => {
                    for (j, up) in ups.iter().enumerate().rev() {
                        dy = up.backward(s, &c.stages[i][j], &dy);
                    }
                }
                Rescale::Same => {}
                Rescale::Down(n) => {
                    for _ in 0..*n {
                        dy = avg_pool2_backward(&dy);
                    }
                }
            }
            d_in.push(lvl.proj.backward(s, &c.inputs[i], &dy));
        }
        d_in
    }

    /// Multiply-accumulates for one sample on a `grid` of tokens.
    pub fn macs(&self, grid: (usize, usize)) -> f64 {
        let ups: Vec<usize> = self
            .levels
            .iter()
            .map(|l| match &l.rescale {
                Rescale::Up(u) => u.len(),
                _ => 0,
            })
            .collect();
        neck_level_macs(self.in_channels, self.channels, &ups, grid)
    }
}

/// Lateral 1x1 convs, top-down pathway, 3x3 smoothing per level, fusion of
/// all levels at the finest stride and a 1x1 classifier, upsampled to the
/// requested output size.
#[derive(Debug, Clone)]
pub struct PyramidDecoder {
    lateral: Vec<Conv1x1>,
    smooth: Vec<Conv3x3>,
    fuse: Conv3x3,
    classifier: Conv1x1,
    pub channels: usize,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    inputs: Vec<Array4<f32>>,
    lat: Vec<Array4<f32>>,
    smooth_cols: Vec<Array2<f32>>,
    smoothed: Vec<Array4<f32>>,
    fuse_cols: Array2<f32>,
    fused: Array4<f32>,
}

pub fn concat_channels(maps: &[Array4<f32>]) -> Array4<f32> {
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(3), &views)
        .expect("maps share spatial dims")
        .as_standard_layout()
        .to_owned()
}

pub fn split_channels(x: &Array4<f32>, widths: &[usize]) -> Vec<Array4<f32>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let part = x.slice(s![.., .., .., start..start + w]).as_standard_layout().to_owned();
            start += w;
            part
        })
        .collect()
}

impl PyramidDecoder {
    pub fn new(
        s: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        n_levels: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            lateral: (0..n_levels)
                .map(|i| Conv1x1::new(s, &format!("{prefix}.lateral.{i}"), in_channels, channels, rng))
                .collect(),
            smooth: (0..n_levels)
                .map(|i| Conv3x3::new(s, &format!("{prefix}.smooth.{i}"), channels, channels, rng))
                .collect(),
            fuse: Conv3x3::new(s, &format!("{prefix}.fuse"), n_levels * channels, channels, rng),
            classifier: Conv1x1::new(s, &format!("{prefix}.classifier"), channels, classes, rng),
            channels,
            classes,
        }
    }

    /// The final 1x1 classifier (weights and bias).
    pub fn classifier(&self) -> &Conv1x1 {
        &self.classifier
    }

    pub fn forward(
        &self,
        s: &ParamStore,
        levels: &[Array4<f32>],
        out_h: usize,
        out_w: usize,
    ) -> (Array4<f32>, DecoderCache) {
        let n = self.lateral.len();
        assert_eq!(levels.len(), n, "one input per pyramid level");
        let lat: Vec<Array4<f32>> = self
            .lateral
            .iter()
            .zip(levels)
            .map(|(l, x)| relu(&l.forward(s, x)))
            .collect();
        let mut merged = lat.clone();
        for i in (0..n - 1).rev() {
            let (_, h, w, _) = merged[i].dim();
            let up = resize(&merged[i + 1], h, w, KERNEL);
            merged[i] += &up;
        }
        let (_, h0, w0, _) = merged[0].dim();
        let mut smooth_cols = Vec::with_capacity(n);
        let mut smoothed = Vec::with_capacity(n);
        let mut ups = Vec::with_capacity(n);
        for (conv, p) in self.smooth.iter().zip(&merged) {
            let (y, cols) = conv.forward(s, p);
            let y = relu(&y);
            ups.push(resize(&y, h0, w0, KERNEL));
            smooth_cols.push(cols);
            smoothed.push(y);
        }
        let cat = concat_channels(&ups);
        let (f, fuse_cols) = self.fuse.forward(s, &cat);
        let fused = relu(&f);
        let z = self.classifier.forward(s, &fused);
        let logits = resize(&z, out_h, out_w, KERNEL);
        let cache = DecoderCache { inputs: levels.to_vec(), lat, smooth_cols, smoothed, fuse_cols, fused };
        (logits, cache)
    }

    /// Returns gradients with respect to each input level.
    pub fn backward(&self, s: &mut ParamStore, c: &DecoderCache, d_logits: &Array4<f32>) -> Vec<Array4<f32>> {
        let n = self.lateral.len();
        let (b, h0, w0, _) = c.fused.dim();
        let dz = resize_backward(d_logits, h0, w0, KERNEL);
        let d_fused = self.classifier.backward(s, &c.fused, &dz);
        let d_f = relu_backward(&c.fused, &d_fused);
        let d_cat = self.fuse.backward(s, &c.fuse_cols, (b, h0, w0, n * self.channels), &d_f);
        let d_ups = split_channels(&d_cat, &vec![self.channels; n]);

        let mut d_merged: Vec<Array4<f32>> = Vec::with_capacity(n);
        for i in 0..n {
            let (_, h, w, ch) = c.smoothed[i].dim();
            let d_y = resize_backward(&d_ups[i], h, w, KERNEL);
            let d_y = relu_backward(&c.smoothed[i], &d_y);
            d_merged.push(self.smooth[i].backward(s, &c.smooth_cols[i], (b, h, w, ch), &d_y));
        }
        for i in 0..n - 1 {
            let (_, h, w, _) = c.lat[i + 1].dim();
            let up = resize_backward(&d_merged[i], h, w, KERNEL);
            d_merged[i + 1] += &up;
        }
        (0..n)
            .map(|i| {
                let d_lat = relu_backward(&c.lat[i], &d_merged[i]);
                self.lateral[i].backward(s, &c.inputs[i], &d_lat)
            })
            .collect()
    }

    /// Multiply-accumulates for one sample whose finest level is `finest`
    /// pixels on a side pair, halving per level.
    pub fn macs(&self, in_channels: usize, finest: (usize, usize)) -> f64 {
        decoder_macs(in_channels, self.channels, self.lateral.len(), self.classes, finest)
    }
}

fn neck_level_macs(in_channels: usize, channels: usize, ups: &[usize], grid: (usize, usize)) -> f64 {
    let px = (grid.0 * grid.1) as f64;
    let c = channels as f64;
    ups.iter()
        .map(|&n| {
            let mut m = px * in_channels as f64 * c;
            let mut p = px;
            for _ in 0..n {
                m += p * c * 4.0 * c;
                p *= 4.0;
            }
            m
        })
        .sum()
}

/// Neck multiply-accumulates computed from its shape alone.
pub fn neck_macs(in_channels: usize, channels: usize, patch: usize, n_levels: usize, grid: (usize, usize)) -> f64 {
    let ups: Vec<usize> = (0..n_levels)
        .map(|i| {
            let stride = level_stride(i);
            if stride < patch {
                (patch / stride).trailing_zeros() as usize
            } else {
                0
            }
        })
        .collect();
    neck_level_macs(in_channels, channels, &ups, grid)
}

/// Decoder multiply-accumulates computed from its shape alone.
pub fn decoder_macs(in_channels: usize, channels: usize, n_levels: usize, classes: usize, finest: (usize, usize)) -> f64 {
    let c = channels as f64;
    let mut m = 0.0;
    let (mut h, mut w) = finest;
    for _ in 0..n_levels {
        let px = (h * w) as f64;
        m += px * in_channels as f64 * c + px * 9.0 * c * c;
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    let px0 = (finest.0 * finest.1) as f64;
    m + px0 * 9.0 * (n_levels as f64 * c) * c + px0 * c * classes as f64
}
