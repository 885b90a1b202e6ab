use ndarray::{Array2, ArrayView2, Axis, Zip};

pub fn softmax_rows(x: ArrayView2<f32>) -> Array2<f32> {
    let mut out = x.to_owned();
    crate::layers::attention::softmax_rows_inplace(&mut out);
    out
}

fn log_softmax_rows(x: ArrayView2<f32>) -> Array2<f32> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean (optionally class-weighted) cross-entropy of `logits` against
/// integer targets, with its gradient.
pub fn cross_entropy(
    logits: ArrayView2<f32>,
    targets: &[usize],
    class_weights: Option<&[f32]>,
) -> (f32, Array2<f32>) {
    assert_eq!(logits.nrows(), targets.len(), "one target per row");
    let k = logits.ncols();
    let mut probs = softmax_rows(logits);
    let weight = |t: usize| class_weights.map_or(1.0, |w| w[t]);
    let total: f32 = targets.iter().map(|&t| weight(t)).sum();
    let norm = if total > 0.0 { total } else { 1.0 };
    let mut loss = 0.0f64;
    for (mut row, &t) in probs.axis_iter_mut(Axis(0)).zip(targets) {
        assert!(t < k, "target {t} out of range for {k} classes");
        let w = weight(t);
        loss -= (w * row[t].max(1e-30).ln()) as f64;
        row[t] -= 1.0;
        row *= w / norm;
    }
    ((loss / norm as f64) as f32, probs)
}

/// Mean over rows of `-sum_j q_j log softmax(s)_j` for a target
/// distribution `q`, with the gradient with respect to `s`.
pub fn soft_cross_entropy(student: ArrayView2<f32>, target: ArrayView2<f32>) -> (f32, Array2<f32>) {
    assert_eq!(student.dim(), target.dim(), "student and target shapes");
    let n = student.nrows().max(1) as f32;
    let logp = log_softmax_rows(student);
    let loss = -(&logp * &target).sum() / n;
    let mut grad = logp.mapv(f32::exp);
    Zip::from(&mut grad).and(&target).for_each(|g, &q| *g = (*g - q) / n);
    (loss, grad)
}
