use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::param::{Init, ParamId, ParamStore};

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Truncated-normal weights (std 0.02) and a zero bias.
    pub fn new(s: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self::with_init(s, name, in_dim, out_dim, true, Init::TruncNormal(0.02), rng)
    }

    pub fn with_init(
        s: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = s.add(&format!("{name}.weight"), &[in_dim, out_dim], init, rng);
        let b = bias.then(|| s.add(&format!("{name}.bias"), &[out_dim], Init::Zeros, rng));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, s: &ParamStore, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&s.v2(self.w));
        if let Some(b) = self.b {
            y += &s.v1(b);
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, s: &mut ParamStore, x: ArrayView2<f32>, dy: ArrayView2<f32>) -> Array2<f32> {
        let dx = dy.dot(&s.v2(self.w).t());
        self.backward_params(s, x, dy);
        dx
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&self, s: &mut ParamStore, x: ArrayView2<f32>, dy: ArrayView2<f32>) {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut s.g2(self.w));
        if let Some(b) = self.b {
            let mut gb = s.g1(b);
            gb += &dy.sum_axis(Axis(0));
        }
    }
}
