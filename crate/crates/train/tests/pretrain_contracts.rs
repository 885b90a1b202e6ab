use ndarray::{Array3, Array4, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalebench_core::dataset::synthetic::make_synthetic_scenes;
use scalebench_core::flops::BackboneSpec;
use scalebench_core::geometry::CropBox;
use scalebench_nn::{Init, ParamStore};
use scalebench_train::crops::{make_crops, CropConfig};
use scalebench_train::pretrain::{
    crop_stream, ema_update, overlap_branch_loss, pretrain, pretrain_step, DistillSlot, OverlapBranch,
    OverlapFeatures, PretrainConfig, PretrainError, PretrainState,
};

fn small_spec() -> BackboneSpec {
    BackboneSpec { patch_size: 8, depth: 2, width: 16, heads: 2, mlp_ratio: 2.0, uses_cls_token: true }
}

fn small_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        backbone: small_spec(),
        overlap_taps: vec![1, 2],
        neck_channels: 8,
        decoder_channels: 8,
        batch_size: 2,
        epochs: 4,
        seed,
        ..PretrainConfig::desk()
    }
}

fn scenes(n: usize) -> Vec<Array3<f32>> {
    make_synthetic_scenes(n, 64, 5).unwrap()
}

fn single(value: f32) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = ParamStore::new();
    let id = s.add("w", &[1], Init::Zeros, &mut rng);
    s.value_mut(id).fill(value);
    s
}

#[test]
fn ema_edge_cases_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut student = ParamStore::new();
    student.add("a", &[3, 4], Init::TruncNormal(1.0), &mut rng);
    student.add("b", &[5], Init::Uniform(2.0), &mut rng);
    let mut teacher = ParamStore::new();
    teacher.add("a", &[3, 4], Init::TruncNormal(1.0), &mut rng);
    teacher.add("b", &[5], Init::Uniform(2.0), &mut rng);

    let before = teacher.clone();
    ema_update(&mut teacher, &student, 1.0).unwrap();
    for (t, b) in teacher.params().iter().zip(before.params()) {
        assert_eq!(t.value, b.value);
    }
    ema_update(&mut teacher, &student, 0.0).unwrap();
    for (t, s) in teacher.params().iter().zip(student.params()) {
        assert_eq!(t.value, s.value);
    }

    let mut t = single(1.0);
    ema_update(&mut t, &single(0.0), 0.9).unwrap();
    assert!((t.params()[0].value[[0]] - 0.9).abs() < 1e-7);
}

#[test]
fn ema_rejects_structural_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut student = ParamStore::new();
    student.add("w", &[2], Init::Zeros, &mut rng);
    let mut teacher = ParamStore::new();
    teacher.add("w", &[3], Init::Zeros, &mut rng);
    assert!(matches!(ema_update(&mut teacher, &student, 0.5), Err(PretrainError::Structure(_))));
    let mut other = ParamStore::new();
    other.add("v", &[2], Init::Zeros, &mut rng);
    assert!(matches!(ema_update(&mut other, &student, 0.5), Err(PretrainError::Structure(_))));
    assert!(matches!(ema_update(&mut single(0.0), &single(1.0), 1.5), Err(PretrainError::Config(_))));
}

proptest! {
    #[test]
    fn ema_preserves_intervals(
        vals in prop::collection::vec((-3.0f32..3.0, -3.0f32..3.0), 1..40),
        m in 0.0f64..=1.0,
    ) {
        let (lo, hi) = vals.iter().fold((f32::MAX, f32::MIN), |(l, h), &(a, b)| (l.min(a).min(b), h.max(a).max(b)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = ParamStore::new();
        let mut s = ParamStore::new();
        let ti = t.add("p", &[vals.len()], Init::Zeros, &mut rng);
        let si = s.add("p", &[vals.len()], Init::Zeros, &mut rng);
        *t.value_mut(ti) = ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.iter().map(|v| v.0).collect()).unwrap();
        *s.value_mut(si) = ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.iter().map(|v| v.1).collect()).unwrap();
        ema_update(&mut t, &s, m).unwrap();
        prop_assert!(t.value(ti).iter().all(|&v| v >= lo && v <= hi));
    }
}

fn branch(store: &mut ParamStore) -> OverlapBranch {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    OverlapBranch::new(store, "overlap", &small_spec(), vec![1, 2], 8, 8, &mut rng)
}

fn feats(b: usize, g: usize, seed: u64) -> Vec<Array4<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2).map(|_| Array4::from_shape_fn((b, g, g, 16), |_| rng.random_range(-1.0f32..1.0))).collect()
}

fn set_classifier(store: &mut ParamStore, bias: [f32; 2]) {
    let w = store.id("overlap.decoder.classifier.weight").unwrap();
    store.value_mut(w).fill(0.0);
    let b = store.id("overlap.decoder.classifier.bias").unwrap();
    store.value_mut(b).assign(&ndarray::arr1(&bias).into_dyn());
}

fn boxes() -> (Vec<CropBox>, Vec<CropBox>) {
    let c1 = CropBox::new(0.0, 0.0, 32.0, 32.0, 32, false).unwrap();
    let c2 = CropBox::new(16.0, 8.0, 32.0, 32.0, 32, true).unwrap();
    (vec![c1, c1], vec![c2, c1])
}

#[test]
fn uniform_logits_give_ln2() {
    let mut store = ParamStore::new();
    let br = branch(&mut store);
    set_classifier(&mut store, [0.0, 0.0]);
    let (c1, c2) = boxes();
    let out = overlap_branch_loss(&br, &mut store, &feats(2, 4, 0), &feats(2, 4, 1), &c1, &c2).unwrap();
    assert!((out.loss as f64 - std::f64::consts::LN_2).abs() < 1e-6, "{}", out.loss);
    // the target lives in the first crop's frame, at the decoder's output side
    assert_eq!(out.targets[0].dim(), (32, 32));
    assert_eq!(out.logits.dim(), (2, 32, 32, 2));
}

#[test]
fn confident_correct_decoder_drives_loss_to_zero() {
    let c = CropBox::new(4.0, 4.0, 32.0, 32.0, 32, false).unwrap();
    let mut last = f32::INFINITY;
    for margin in [1.0f32, 4.0, 10.0] {
        let mut store = ParamStore::new();
        let br = branch(&mut store);
        set_classifier(&mut store, [-margin, margin]);
        let out = overlap_branch_loss(&br, &mut store, &feats(1, 4, 0), &feats(1, 4, 1), &[c], &[c]).unwrap();
        assert!(out.targets[0].iter().all(|&v| v == 1));
        assert!(out.loss < last);
        last = out.loss;
    }
    assert!(last < 1e-8);
}

#[test]
fn mismatched_grids_are_rejected() {
    let mut store = ParamStore::new();
    let br = branch(&mut store);
    let (c1, c2) = boxes();
    let err = overlap_branch_loss(&br, &mut store, &feats(2, 4, 0), &feats(2, 2, 1), &c1, &c2).unwrap_err();
    assert!(matches!(err, PretrainError::GridMismatch(_)));
}

fn first_batch(cfg: &PretrainConfig, imgs: &[Array3<f32>]) -> (Vec<usize>, Vec<scalebench_train::crops::CropBatch>) {
    crop_stream(imgs, cfg, 1).next().unwrap().unwrap()
}

#[test]
fn teacher_never_receives_gradient_and_follows_the_ema_recurrence() {
    for distill in [DistillSlot::Zero, DistillSlot::dino()] {
        let cfg = PretrainConfig { distill, ..small_config(4) };
        let imgs = scenes(4);
        let mut state = PretrainState::new(cfg.clone(), imgs.len()).unwrap();
        for step in 0..2 {
            let (ids, crops) = crop_stream(&imgs, &cfg, 2).nth(step).unwrap().unwrap();
            let before = state.teacher.clone();
            let stats = pretrain_step(&mut state, &crops, step, &ids).unwrap();
            assert!(stats.total_loss.is_finite());
            assert_eq!(state.teacher_grad_abs_sum(), 0.0);
            let m = stats.momentum as f32;
            for (t, b) in state.teacher.params().iter().zip(before.params()) {
                let s = &state.student.param(state.student.id(&t.name).unwrap()).value;
                let expected = &b.value * m + s * (1.0 - m);
                let err = (&t.value - &expected).iter().fold(0.0f32, |a, v| a.max(v.abs()));
                assert!(err <= 1e-7, "{} off by {err}", t.name);
            }
        }
    }
}

#[test]
fn pretrain_steps_are_deterministic() {
    let imgs = scenes(4);
    let run = || {
        let cfg = small_config(9);
        let mut state = PretrainState::new(cfg.clone(), imgs.len()).unwrap();
        for (i, item) in crop_stream(&imgs, &cfg, 2).enumerate() {
            let (ids, crops) = item.unwrap();
            pretrain_step(&mut state, &crops, i, &ids).unwrap();
        }
        state
    };
    let (a, b) = (run(), run());
    for (p, q) in a.student.params().iter().zip(b.student.params()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    for (p, q) in a.teacher.params().iter().zip(b.teacher.params()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn student_only_variant_runs() {
    let cfg = PretrainConfig { overlap_features: OverlapFeatures::StudentOnly, ..small_config(2) };
    let imgs = scenes(2);
    let mut state = PretrainState::new(cfg.clone(), imgs.len()).unwrap();
    let (ids, crops) = first_batch(&cfg, &imgs);
    let stats = pretrain_step(&mut state, &crops, 0, &ids).unwrap();
    assert!(stats.overlap_loss.is_finite());
    assert_eq!(state.teacher_grad_abs_sum(), 0.0);
}

#[test]
fn non_finite_loss_reports_the_batch() {
    let cfg = small_config(2);
    let imgs = scenes(2);
    let mut state = PretrainState::new(cfg.clone(), imgs.len()).unwrap();
    let id = state.student.id("backbone.patch_embed.proj.weight").unwrap();
    state.student.value_mut(id).fill(f32::NAN);
    let (ids, crops) = first_batch(&cfg, &imgs);
    match pretrain_step(&mut state, &crops, 7, &ids) {
        Err(PretrainError::NonFinite { batch_id, images, .. }) => {
            assert_eq!(batch_id, 7);
            assert_eq!(images, ids);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn crops_are_recorded_and_deterministic() {
    let img = scenes(1).remove(0);
    let cfg = CropConfig::desk();
    let draw = |seed| make_crops(&img, &cfg, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let a = draw(3);
    assert_eq!((a.global.len(), a.local.len()), (2, 8));
    assert_eq!(a.boxes().count(), 10);
    assert_eq!(a, draw(3));
    for c in &a.global {
        assert_eq!(c.pixels.dim(), (32, 32, 3));
    }
    for c in &a.local {
        assert_eq!(c.pixels.dim(), (16, 16, 3));
    }
}

#[test]
fn scale_aug_varies_global_source_width() {
    let img = scenes(1).remove(0);
    let cfg = CropConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let widths: Vec<f64> = (0..100)
        .map(|_| make_crops(&img, &cfg, true, &mut rng).unwrap().global[0].bbox.w())
        .collect();
    let mean = widths.iter().sum::<f64>() / widths.len() as f64;
    let var = widths.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / widths.len() as f64;
    assert!(var > 0.0);
}

#[test]
fn without_scale_aug_global_boxes_keep_their_size() {
    let cfg = small_config(1);
    let imgs = scenes(6);
    let sizes: Vec<(f64, f64)> = crop_stream(&imgs, &cfg, 12)
        .flat_map(|item| item.unwrap().1)
        .flat_map(|c| c.global.into_iter().map(|g| (g.bbox.w(), g.bbox.h())))
        .collect();
    assert!(!sizes.is_empty());
    assert!(sizes.iter().all(|&wh| wh == (32.0, 32.0)));
}

#[test]
fn pretrain_writes_log_and_loadable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PretrainConfig { max_steps: Some(3), checkpoint_every: Some(2), ..small_config(0) };
    let out = pretrain(&scenes(4), cfg, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(out.log.len(), 3);
    let log = std::fs::read_to_string(dir.path().join("pretrain_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,batch_id,total_loss,overlap_loss"));
    // step 2 (periodic) and step 3 (final), student and teacher each
    assert_eq!(out.checkpoints.len(), 4);

    let teacher = out.checkpoints.iter().find(|p| p.to_string_lossy().contains("teacher_step000003")).unwrap();
    let ck = scalebench_nn::checkpoint::load(teacher).unwrap();
    let mut model = scalebench_train::assembly::build_change_detector(
        small_spec(),
        32,
        scalebench_train::assembly::Fusion::Subtract,
        vec![1, 2],
        0,
    )
    .unwrap();
    let report = model.load_backbone(&ck).unwrap();
    assert!(!report.loaded.is_empty());
    let id = model.store.id("backbone.pos_embed").unwrap();
    assert_eq!(model.store.value(id), &ck.tensors["backbone.pos_embed"]);
}
