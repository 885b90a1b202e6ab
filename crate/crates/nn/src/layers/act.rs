use ndarray::{Array, Dimension, Zip};

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_C: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(|v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh()))
}

pub fn gelu_backward<D: Dimension>(x: &Array<f32, D>, dy: &Array<f32, D>) -> Array<f32, D> {
    Zip::from(x).and(dy).map_collect(|&v, &g| {
        let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
        let t = u.tanh();
        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    })
}

pub fn relu<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its output `y`.
pub fn relu_backward<D: Dimension>(y: &Array<f32, D>, dy: &Array<f32, D>) -> Array<f32, D> {
    Zip::from(y).and(dy).map_collect(|&v, &g| if v > 0.0 { g } else { 0.0 })
}
