use ndarray::{Array2, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalebench_core::flops::{BackboneSpec, FlopConvention};
use scalebench_core::metrics::{Prediction, Predictor};
use scalebench_core::sample::{BitemporalSample, Sample};
use scalebench_train::assembly::{
    build_change_detector, build_classifier, AssemblyConfig, AssemblyError, Fusion, ModelAssembly, PooledBy,
};

fn small_spec(cls: bool) -> BackboneSpec {
    BackboneSpec { patch_size: 8, depth: 2, width: 16, heads: 2, mlp_ratio: 2.0, uses_cls_token: cls }
}

fn images(b: usize, side: usize, seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((b, side, side, 3), |_| rng.random_range(0.0..1.0))
}

fn directions(m: &ModelAssembly, seed: u64) -> Vec<ArrayD<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.store
        .params()
        .iter()
        .map(|p| p.value.map(|_| rng.random_range(-1.0f32..1.0)))
        .collect()
}

fn shift(m: &mut ModelAssembly, dir: &[ArrayD<f32>], eps: f32) {
    for (p, d) in m.store.params_mut().iter_mut().zip(dir) {
        p.value.scaled_add(eps, d);
    }
}

fn directional(m: &ModelAssembly, dir: &[ArrayD<f32>]) -> f64 {
    m.store
        .params()
        .iter()
        .zip(dir)
        .map(|(p, d)| (&p.grad * d).sum() as f64)
        .sum()
}

fn zero_outside(dir: &mut [ArrayD<f32>], m: &ModelAssembly, keep: impl Fn(&str) -> bool) {
    for (p, d) in m.store.params().iter().zip(dir.iter_mut()) {
        if !keep(&p.name) {
            d.fill(0.0);
        }
    }
}

fn random_like(f: &Array4<f32>, seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    f.map(|_| rng.random_range(-0.5f32..0.5))
}

fn assert_close(analytic: f64, numeric: f64) {
    let tol = 2e-2 * analytic.abs().max(numeric.abs()) + 2e-3;
    assert!((analytic - numeric).abs() <= tol, "analytic {analytic} vs numeric {numeric}");
}

fn cd_loss(m: &ModelAssembly, a: &Array4<f32>, b: &Array4<f32>, r: &Array4<f32>) -> f64 {
    let (z, _) = m.forward_cd(a, b);
    (&z * r).sum() as f64
}

#[test]
fn change_detector_backbone_gradients_match_finite_differences() {
    // a linear probe on the fused features keeps the objective smooth
    for fusion in [Fusion::Subtract, Fusion::Concat] {
        let mut m = build_change_detector(small_spec(true), 32, fusion, vec![1, 2], 3).unwrap();
        let (a, b) = (images(2, 32, 1), images(2, 32, 2));
        let (_, fwd) = m.forward_cd(&a, &b);
        let probes: Vec<Array4<f32>> = fwd
            .fused()
            .iter()
            .enumerate()
            .map(|(i, f)| random_like(f, 20 + i as u64))
            .collect();
        let loss = |mm: &ModelAssembly| -> f64 {
            let (_, f) = mm.forward_cd(&a, &b);
            f.fused().iter().zip(&probes).map(|(x, r)| (x * r).sum() as f64).sum()
        };
        m.store.zero_grad();
        m.backward_fused(&fwd, probes.clone());
        let dir = directions(&m, 5);
        let analytic = directional(&m, &dir);
        let eps = 1e-3;
        let mut plus = m.clone();
        shift(&mut plus, &dir, eps);
        let mut minus = m.clone();
        shift(&mut minus, &dir, -eps);
        assert_close(analytic, (loss(&plus) - loss(&minus)) / (2.0 * eps as f64));
    }
}

#[test]
fn change_detector_head_gradients_match_finite_differences() {
    for fusion in [Fusion::Subtract, Fusion::Concat] {
        let mut m = build_change_detector(small_spec(true), 32, fusion, vec![1, 2], 3).unwrap();
        let (a, b) = (images(2, 32, 1), images(2, 32, 2));
        let r = images(2, 32, 9).slice_move(ndarray::s![.., .., .., ..2]).mapv(|v| v - 0.5);
        let (_, fwd) = m.forward_cd(&a, &b);
        m.store.zero_grad();
        m.backward_cd(&fwd, &r, false);
        let mut dir = directions(&m, 5);
        zero_outside(&mut dir, &m, |n| !ModelAssembly::is_backbone_param(n));
        let analytic = directional(&m, &dir);
        // ReLU kinks: the perturbation has to stay tiny
        let eps = 3e-5;
        let mut plus = m.clone();
        shift(&mut plus, &dir, eps);
        let mut minus = m.clone();
        shift(&mut minus, &dir, -eps);
        let numeric = (cd_loss(&plus, &a, &b, &r) - cd_loss(&minus, &a, &b, &r)) / (2.0 * eps as f64);
        let tol = 3e-2 * analytic.abs().max(numeric.abs()) + 1e-1;
        assert!((analytic - numeric).abs() <= tol, "analytic {analytic} vs numeric {numeric}");
    }
}

#[test]
fn classifier_gradients_match_finite_differences() {
    for pooled in [PooledBy::ClsToken, PooledBy::GlobalAverage] {
        let mut m = build_classifier(small_spec(true), 32, 5, pooled, 4).unwrap();
        let x = images(3, 32, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0f32..1.0));
        let (_, fwd) = m.forward_cls(&x);
        m.store.zero_grad();
        m.backward_cls(&fwd, &r, true);
        let dir = directions(&m, 6);
        let analytic = directional(&m, &dir);
        let eps = 2e-3;
        let loss = |mm: &ModelAssembly| (&mm.forward_cls(&x).0 * &r).sum() as f64;
        let mut plus = m.clone();
        shift(&mut plus, &dir, eps);
        let mut minus = m.clone();
        shift(&mut minus, &dir, -eps);
        assert_close(analytic, (loss(&plus) - loss(&minus)) / (2.0 * eps as f64));
    }
}

#[test]
fn frozen_backbone_receives_no_gradient() {
    let mut m = build_change_detector(small_spec(false), 32, Fusion::Subtract, vec![1, 2], 0).unwrap();
    let (a, b) = (images(1, 32, 1), images(1, 32, 2));
    let (z, fwd) = m.forward_cd(&a, &b);
    m.backward_cd(&fwd, &z.mapv(|_| 1.0), false);
    for p in m.store.params() {
        let nonzero = p.grad.iter().any(|&g| g != 0.0);
        if ModelAssembly::is_backbone_param(&p.name) {
            assert!(!nonzero, "{} got gradient", p.name);
        }
    }
    assert!(m.store.params().iter().any(|p| p.name.starts_with("decoder.") && p.grad.iter().any(|&g| g != 0.0)));
}

#[test]
fn output_shapes_follow_the_input() {
    let m = build_change_detector(small_spec(false), 64, Fusion::Concat, vec![1, 2], 0).unwrap();
    let (z, fwd) = m.forward_cd(&images(2, 64, 1), &images(2, 64, 2));
    assert_eq!(z.dim(), (2, 64, 64, 2));
    assert_eq!(fwd.fused()[0].dim(), (2, 8, 8, 32));
    // other resolutions run through the interpolated position embedding
    let (z, _) = m.forward_cd(&images(1, 32, 1), &images(1, 32, 2));
    assert_eq!(z.dim(), (1, 32, 32, 2));

    let c = build_classifier(small_spec(true), 64, 7, PooledBy::ClsToken, 0).unwrap();
    assert_eq!(c.forward_cls(&images(3, 64, 0)).0.dim(), (3, 7));
}

#[test]
fn subtract_fusion_is_zero_for_identical_inputs_and_antisymmetric() {
    let m = build_change_detector(small_spec(true), 32, Fusion::Subtract, vec![1, 2], 1).unwrap();
    let a = images(2, 32, 3);
    let b = images(2, 32, 4);
    let (_, same) = m.forward_cd(&a, &a);
    assert!(same.fused().iter().all(|f| f.iter().all(|&v| v == 0.0)));
    let (_, ab) = m.forward_cd(&a, &b);
    let (_, ba) = m.forward_cd(&b, &a);
    for (x, y) in ab.fused().iter().zip(ba.fused()) {
        let err = (x + y).iter().fold(0.0f32, |acc, v| acc.max(v.abs()));
        assert!(err < 1e-5, "antisymmetry violated by {err}");
    }
}

#[test]
fn final_tap_matches_the_unnormalized_last_block() {
    let m = build_classifier(small_spec(true), 32, 3, PooledBy::ClsToken, 2).unwrap();
    let x = images(2, 32, 5);
    let taps = m.forward_with_taps(&x, &[1, 2]);
    assert_eq!(taps[&2].dim(), (2, 4, 4, 16));
    assert_ne!(taps[&1], taps[&2]);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = AssemblyConfig::change_detector(small_spec(false), 32, Fusion::Subtract, vec![3]);
    assert!(matches!(ModelAssembly::new(bad, 0), Err(AssemblyError::Invalid(_))));
    let bad = AssemblyConfig::change_detector(small_spec(false), 32, Fusion::Subtract, vec![]);
    assert!(matches!(ModelAssembly::new(bad, 0), Err(AssemblyError::Invalid(_))));
    let bad = AssemblyConfig::classifier(small_spec(false), 32, 4, PooledBy::ClsToken);
    assert!(matches!(ModelAssembly::new(bad, 0), Err(AssemblyError::Invalid(_))));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let m = build_change_detector(small_spec(false), 32, Fusion::Concat, vec![1, 2], 11).unwrap();
    m.save(&path).unwrap();
    let back = ModelAssembly::load(&path).unwrap();
    let (a, b) = (images(1, 32, 1), images(1, 32, 2));
    assert_eq!(m.forward_cd(&a, &b).0, back.forward_cd(&a, &b).0);

    let other = AssemblyConfig::change_detector(small_spec(false), 32, Fusion::Subtract, vec![1, 2]);
    assert!(matches!(ModelAssembly::load_expecting(&path, &other), Err(AssemblyError::ConfigMismatch { .. })));
}

#[test]
fn predictor_reports_masks_and_flops() {
    let m = build_change_detector(small_spec(false), 32, Fusion::Subtract, vec![1, 2], 0).unwrap();
    let img = images(1, 32, 0).index_axis_move(ndarray::Axis(0), 0);
    let s: Sample = BitemporalSample::new(img.clone(), img, Array2::zeros((32, 32))).unwrap().into();
    let preds = m.predict(&[s]).unwrap();
    assert!(matches!(&preds[0], Prediction::Mask(mk) if mk.dim() == (32, 32)));
    let rep = m.flops(FlopConvention::MacAsOne).unwrap();
    assert!(rep.passed);
    let names: Vec<_> = rep.per_component.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["backbone_a", "backbone_b", "neck", "decoder"]);
}
