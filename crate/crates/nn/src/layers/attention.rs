use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::act::{gelu, gelu_backward};
use super::linear::Linear;
use super::norm::{LayerNorm, LnCache};
use crate::param::ParamStore;

/// Multi-head self-attention over `batch` sequences of `tokens` rows each,
/// packed as a `(batch * tokens, dim)` matrix.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    batch: usize,
    tokens: usize,
    x: Array2<f32>,
    qkv: Array2<f32>,
    probs: Vec<Array2<f32>>,
    ctx: Array2<f32>,
}

pub(crate) fn softmax_rows_inplace(a: &mut Array2<f32>) {
    for mut row in a.axis_iter_mut(Axis(0)) {
        let m = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

impl Attention {
    pub fn new(s: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(s, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(s, &format!("{name}.proj"), dim, dim, rng),
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, s: &ParamStore, x: Array2<f32>, batch: usize, tokens: usize) -> (Array2<f32>, AttnCache) {
        assert_eq!(x.nrows(), batch * tokens, "attention input rows");
        let (d, dh) = (self.dim, self.head_dim());
        let scale = (dh as f32).powf(-0.5);
        let qkv = self.qkv.forward(s, x.view());
        let mut ctx = Array2::<f32>::zeros((batch * tokens, d));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let r = b * tokens..(b + 1) * tokens;
            for h in 0..self.heads {
                let c = h * dh..(h + 1) * dh;
                let q = qkv.slice(s![r.clone(), c.clone()]);
                let k = qkv.slice(s![r.clone(), d + c.start..d + c.end]);
                let v = qkv.slice(s![r.clone(), 2 * d + c.start..2 * d + c.end]);
                let mut att = q.dot(&k.t());
                att *= scale;
                softmax_rows_inplace(&mut att);
                general_mat_mul(1.0, &att, &v, 0.0, &mut ctx.slice_mut(s![r.clone(), c]));
                probs.push(att);
            }
        }
        let y = self.proj.forward(s, ctx.view());
        (y, AttnCache { batch, tokens, x, qkv, probs, ctx })
    }

    pub fn backward(&self, s: &mut ParamStore, c: &AttnCache, dy: ArrayView2<f32>) -> Array2<f32> {
        let (d, dh) = (self.dim, self.head_dim());
        let scale = (dh as f32).powf(-0.5);
        let dctx = self.proj.backward(s, c.ctx.view(), dy);
        let mut dqkv = Array2::<f32>::zeros(c.qkv.raw_dim());
        for b in 0..c.batch {
            let r = b * c.tokens..(b + 1) * c.tokens;
            for h in 0..self.heads {
                let p = &c.probs[b * self.heads + h];
                let cq = h * dh..(h + 1) * dh;
                let ck = d + cq.start..d + cq.end;
                let cv = 2 * d + cq.start..2 * d + cq.end;
                let q = c.qkv.slice(s![r.clone(), cq.clone()]);
                let k = c.qkv.slice(s![r.clone(), ck.clone()]);
                let v = c.qkv.slice(s![r.clone(), cv.clone()]);
                let dout = dctx.slice(s![r.clone(), cq.clone()]);
                general_mat_mul(1.0, &p.t(), &dout, 0.0, &mut dqkv.slice_mut(s![r.clone(), cv]));
                let mut ds = dout.dot(&v.t());
                for (mut dsr, pr) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                    let dot = dsr.dot(&pr);
                    dsr.zip_mut_with(&pr, |g, &pv| *g = pv * (*g - dot) * scale);
                }
                general_mat_mul(1.0, &ds, &k, 0.0, &mut dqkv.slice_mut(s![r.clone(), cq]));
                general_mat_mul(1.0, &ds.t(), &q, 0.0, &mut dqkv.slice_mut(s![r.clone(), ck]));
            }
        }
        self.qkv.backward(s, c.x.view(), dqkv.view())
    }
}

impl AttnCache {
    /// Attention probabilities, one `(tokens, tokens)` matrix per
    /// `(batch, head)` in batch-major order.
    pub fn probs(&self) -> &[Array2<f32>] {
        &self.probs
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))` then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    h: Array2<f32>,
    pre: Array2<f32>,
    act: Array2<f32>,
}

impl Block {
    pub fn new(s: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(s, &format!("{name}.norm1"), dim, rng),
            attn: Attention::new(s, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(s, &format!("{name}.norm2"), dim, rng),
            fc1: Linear::new(s, &format!("{name}.mlp.fc1"), dim, hidden, rng),
            fc2: Linear::new(s, &format!("{name}.mlp.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, s: &ParamStore, x: &Array2<f32>, batch: usize, tokens: usize) -> (Array2<f32>, BlockCache) {
        let (a_in, ln1) = self.norm1.forward(s, x.view());
        let (a_out, attn) = self.attn.forward(s, a_in, batch, tokens);
        let x1 = x + &a_out;
        let (h, ln2) = self.norm2.forward(s, x1.view());
        let pre = self.fc1.forward(s, h.view());
        let act = gelu(&pre);
        let y = x1 + self.fc2.forward(s, act.view());
        (y, BlockCache { ln1, attn, ln2, h, pre, act })
    }

    pub fn backward(&self, s: &mut ParamStore, c: &BlockCache, dy: &Array2<f32>) -> Array2<f32> {
        let dact = self.fc2.backward(s, c.act.view(), dy.view());
        let dpre = gelu_backward(&c.pre, &dact);
        let dh = self.fc1.backward(s, c.h.view(), dpre.view());
        let dx1 = dy + &self.norm2.backward(s, &c.ln2, dh.view());
        let da = self.attn.backward(s, &c.attn, dx1.view());
        dx1 + self.norm1.backward(s, &c.ln1, da.view())
    }
}
