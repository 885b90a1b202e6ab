use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::param::{Init, ParamId, ParamStore};

/// Layer normalization over the last axis with a learned affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

impl LayerNorm {
    pub fn new(s: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            gamma: s.add(&format!("{name}.weight"), &[dim], Init::Ones, rng),
            beta: s.add(&format!("{name}.bias"), &[dim], Init::Zeros, rng),
            dim,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, s: &ParamStore, x: ArrayView2<f32>) -> (Array2<f32>, LnCache) {
        let n = x.ncols() as f32;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::<f32>::zeros(x.nrows());
        for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            *r = 1.0 / (var + self.eps).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| (v - mean) * rs);
        }
        let g = s.v1(self.gamma);
        let b = s.v1(self.beta);
        let y = &xhat * &g + &b;
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, s: &mut ParamStore, c: &LnCache, dy: ArrayView2<f32>) -> Array2<f32> {
        let n = dy.ncols() as f32;
        let dyg = &dy * &s.v1(self.gamma);
        let mut dx = Array2::<f32>::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dyg.rows())
            .and(c.xhat.rows())
            .and(&c.rstd)
            .for_each(|mut dxr, g, xh, &rs| {
                let mg = g.sum() / n;
                let mgx = g.dot(&xh) / n;
                Zip::from(&mut dxr)
                    .and(&g)
                    .and(&xh)
                    .for_each(|d, &gv, &xv| *d = rs * (gv - mg - xv * mgx));
            });
        let dgamma = (&dy * &c.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let mut gg = s.g1(self.gamma);
        gg += &dgamma;
        let mut gb = s.g1(self.beta);
        gb += &dbeta;
        dx
    }
}
