//! Plain ViT backbone with intermediate-layer taps.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;
use scalebench_core::flops::BackboneSpec;
use scalebench_core::resample::ResampleKernel;
use scalebench_nn::layers::spatial::{from_rows, resize, resize_backward};
use scalebench_nn::layers::{Block, BlockCache, LayerNorm, LnCache, Linear};
use scalebench_nn::{Init, ParamId, ParamStore};

const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone)]
pub struct VisionTransformer {
    pub spec: BackboneSpec,
    /// Side the position embedding was built for; other sides interpolate.
    pub image_size: usize,
    pub patch_embed: Linear,
    pub cls_token: Option<ParamId>,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

/// Result of one backbone pass plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct VitOutput {
    /// Final normalized tokens, `(batch * tokens, width)`, class token first
    /// in each sequence when present.
    pub tokens: Array2<f32>,
    /// Patch tokens after each requested block (1-based), `(batch * grid, width)`.
    pub taps: BTreeMap<usize, Array2<f32>>,
    pub batch: usize,
    pub grid: (usize, usize),
    patches: Array2<f32>,
    blocks: Vec<BlockCache>,
    norm: LnCache,
}

impl VitOutput {
    pub fn seq_len(&self) -> usize {
        self.grid.0 * self.grid.1 + usize::from(self.has_cls())
    }

    fn has_cls(&self) -> bool {
        self.tokens.nrows() != self.batch * self.grid.0 * self.grid.1
    }

    /// Normalized class tokens, `(batch, width)`.
    pub fn cls(&self) -> Array2<f32> {
        assert!(self.has_cls(), "backbone has no class token");
        let n = self.seq_len();
        self.tokens.slice(s![..;n, ..]).to_owned()
    }

    /// Mean of the normalized patch tokens per image, `(batch, width)`.
    pub fn patch_mean(&self) -> Array2<f32> {
        let n = self.seq_len();
        let off = usize::from(self.has_cls());
        let d = self.tokens.ncols();
        let mut out = Array2::<f32>::zeros((self.batch, d));
        for b in 0..self.batch {
            let rows = self.tokens.slice(s![b * n + off..(b + 1) * n, ..]);
            out.row_mut(b).assign(&rows.mean_axis(Axis(0)).expect("nonempty grid"));
        }
        out
    }

    /// Tap `layer` reshaped to a `(batch, gh, gw, width)` feature map.
    pub fn tap_map(&self, layer: usize) -> Option<Array4<f32>> {
        self.taps
            .get(&layer)
            .map(|t| from_rows(t.clone(), self.batch, self.grid.0, self.grid.1))
    }
}

impl VisionTransformer {
    /// Registers parameters under `prefix` (e.g. `"backbone"`).
    pub fn new(s: &mut ParamStore, prefix: &str, spec: &BackboneSpec, image_size: usize, rng: &mut impl Rng) -> Self {
        let g = image_size / spec.patch_size;
        let d = spec.width;
        let p = spec.patch_size;
        let patch_embed = Linear::new(s, &format!("{prefix}.patch_embed.proj"), p * p * 3, d, rng);
        let cls_token = spec
            .uses_cls_token
            .then(|| s.add(&format!("{prefix}.cls_token"), &[1, d], Init::TruncNormal(0.02), rng));
        let n_pos = g * g + usize::from(spec.uses_cls_token);
        let pos_embed = s.add(&format!("{prefix}.pos_embed"), &[n_pos, d], Init::TruncNormal(0.02), rng);
        let blocks = (0..spec.depth)
            .map(|i| Block::new(s, &format!("{prefix}.blocks.{i}"), d, spec.heads, spec.mlp_hidden(), rng))
            .collect();
        let norm = LayerNorm::new(s, &format!("{prefix}.norm"), d, rng);
        Self { spec: spec.clone(), image_size, patch_embed, cls_token, pos_embed, blocks, norm }
    }

    fn base_grid(&self) -> usize {
        self.image_size / self.spec.patch_size
    }

    /// Rows `(b, gy, gx)`, columns `(py, px, c)`, normalized per channel.
    fn patchify(&self, images: &Array4<f32>) -> Array2<f32> {
        let (b, h, w, c) = images.dim();
        assert_eq!(c, 3, "RGB input expected");
        let p = self.spec.patch_size;
        assert!(h % p == 0 && w % p == 0, "image {h}x{w} not divisible by patch {p}");
        let (gh, gw) = (h / p, w / p);
        let mut out = Array2::<f32>::zeros((b * gh * gw, p * p * 3));
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut row = out.row_mut((bi * gh + gy) * gw + gx);
                    let row = row.as_slice_mut().expect("contiguous row");
                    for py in 0..p {
                        for px in 0..p {
                            for ch in 0..3 {
                                let v = images[[bi, gy * p + py, gx * p + px, ch]];
                                row[(py * p + px) * 3 + ch] = (v - MEAN[ch]) / STD[ch];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn has_cls(&self) -> bool {
        self.cls_token.is_some()
    }

    /// Patch part of the position embedding resized to `(gh, gw)`.
    fn patch_pos(&self, s: &ParamStore, gh: usize, gw: usize) -> Array2<f32> {
        let off = usize::from(self.has_cls());
        let g = self.base_grid();
        let pos = s.v2(self.pos_embed).slice(s![off.., ..]).to_owned();
        if (gh, gw) == (g, g) {
            return pos;
        }
        let map = from_rows(pos, 1, g, g);
        let r = resize(&map, gh, gw, ResampleKernel::BilinearNoAntialias);
        r.into_shape_with_order((gh * gw, self.spec.width)).expect("contiguous")
    }

    /// Runs the backbone and records patch tokens after each layer in `taps`
    /// (1-based block indices).
    pub fn forward(&self, s: &ParamStore, images: &Array4<f32>, taps: &[usize]) -> VitOutput {
        let (b, h, w, _) = images.dim();
        let p = self.spec.patch_size;
        let (gh, gw) = (h / p, w / p);
        let g = gh * gw;
        let off = usize::from(self.has_cls());
        let n = g + off;
        let d = self.spec.width;
        for &t in taps {
            assert!(t >= 1 && t <= self.blocks.len(), "tap layer {t} out of range");
        }

        let patches = self.patchify(images);
        let emb = self.patch_embed.forward(s, patches.view());
        let pos = self.patch_pos(s, gh, gw);
        let mut x = Array2::<f32>::zeros((b * n, d));
        for bi in 0..b {
            if let Some(cls) = self.cls_token {
                let row = &s.v2(cls).row(0) + &s.v2(self.pos_embed).row(0);
                x.row_mut(bi * n).assign(&row);
            }
            let mut dst = x.slice_mut(s![bi * n + off..(bi + 1) * n, ..]);
            dst.assign(&emb.slice(s![bi * g..(bi + 1) * g, ..]));
            dst += &pos;
        }

        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut tapped = BTreeMap::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let (y, c) = blk.forward(s, &x, b, n);
            x = y;
            caches.push(c);
            if taps.contains(&(i + 1)) {
                tapped.insert(i + 1, patch_rows(&x, b, n, off));
            }
        }
        let (tokens, norm) = self.norm.forward(s, x.view());
        VitOutput { tokens, taps: tapped, batch: b, grid: (gh, gw), patches, blocks: caches, norm }
    }

    /// Accumulates parameter gradients given gradients on the final tokens
    /// and/or on tapped patch tokens. Blocks above the highest layer that
    /// receives gradient are skipped.
    pub fn backward(
        &self,
        s: &mut ParamStore,
        out: &VitOutput,
        d_tokens: Option<&Array2<f32>>,
        d_taps: &BTreeMap<usize, Array2<f32>>,
    ) {
        let b = out.batch;
        let off = usize::from(self.has_cls());
        let n = out.seq_len();
        let g = n - off;
        let d = self.spec.width;
        let top = if d_tokens.is_some() {
            self.blocks.len()
        } else {
            match d_taps.keys().next_back() {
                Some(&t) => t,
                None => return,
            }
        };
        let mut dx = match d_tokens {
            Some(dt) => self.norm.backward(s, &out.norm, dt.view()),
            None => Array2::<f32>::zeros((b * n, d)),
        };
        for layer in (1..=top).rev() {
            if let Some(dt) = d_taps.get(&layer) {
                for bi in 0..b {
                    let mut dst = dx.slice_mut(s![bi * n + off..(bi + 1) * n, ..]);
                    dst += &dt.slice(s![bi * g..(bi + 1) * g, ..]);
                }
            }
            dx = self.blocks[layer - 1].backward(s, &out.blocks[layer - 1], &dx);
        }

        let mut d_emb = Array2::<f32>::zeros((b * g, d));
        let mut d_pos = Array2::<f32>::zeros((n, d));
        for bi in 0..b {
            let rows = dx.slice(s![bi * n..(bi + 1) * n, ..]);
            d_pos += &rows;
            d_emb.slice_mut(s![bi * g..(bi + 1) * g, ..]).assign(&rows.slice(s![off.., ..]));
        }
        if let Some(cls) = self.cls_token {
            let mut gc = s.g2(cls);
            let mut row = gc.row_mut(0);
            row += &d_pos.row(0);
        }
        let gb = self.base_grid();
        let (gh, gw) = out.grid;
        let d_patch_pos = d_pos.slice(s![off.., ..]).to_owned();
        let d_patch_pos = if (gh, gw) == (gb, gb) {
            d_patch_pos
        } else {
            let map = from_rows(d_patch_pos, 1, gh, gw);
            resize_backward(&map, gb, gb, ResampleKernel::BilinearNoAntialias)
                .into_shape_with_order((gb * gb, d))
                .expect("contiguous")
        };
        {
            let mut gp = s.g2(self.pos_embed);
            if off == 1 {
                let mut row = gp.row_mut(0);
                row += &d_pos.row(0);
            }
            let mut rest = gp.slice_mut(s![off.., ..]);
            rest += &d_patch_pos;
        }
        self.patch_embed.backward_params(s, out.patches.view(), d_emb.view());
    }
}

fn patch_rows(x: &Array2<f32>, b: usize, n: usize, off: usize) -> Array2<f32> {
    let g = n - off;
    let mut out = Array2::<f32>::zeros((b * g, x.ncols()));
    for bi in 0..b {
        out.slice_mut(s![bi * g..(bi + 1) * g, ..])
            .assign(&x.slice(s![bi * n + off..(bi + 1) * n, ..]));
    }
    out
}
