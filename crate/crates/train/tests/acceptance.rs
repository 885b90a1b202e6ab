//! End-to-end acceptance suite. Every criterion runs even when an earlier
//! one fails; each prints one `[PASS]` or `[FAIL]` line and the test fails
//! at the end if any criterion did.

use std::io::Write;
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalebench_core::dataset::synthetic::{make_synthetic_cd_fixture, make_synthetic_scenes};
use scalebench_core::distortion::{build_eval_variants, distort, DistortionSpec};
use scalebench_core::flops::{vit_forward_flops, BackboneSpec, FlopConvention};
use scalebench_core::geometry::{map_point_from_crop, map_point_to_crop, rasterize_overlap_mask, CropBox, Point};
use scalebench_core::manifest::RunManifest;
use scalebench_core::metrics::{auc, RobustnessCurve};
use scalebench_core::sample::{Sample, SampleKind};
use scalebench_nn::{Init, ParamStore};
use scalebench_train::assembly::{
    build_change_detector, default_taps, AssemblyConfig, Fusion, ModelAssembly, PooledBy,
};
use scalebench_train::finetune::{finetune, finetune_and_evaluate, make_optimizer, TrainConfig};
use scalebench_train::pretrain::{
    crop_stream, ema_update, pretrain, pretrain_step, OverlapFeatures, PretrainConfig, PretrainState,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const SEEDS: [u64; 3] = [0, 1, 2];
const FACTORS: [u32; 4] = [1, 2, 4, 8];

fn curve_auc(scores: &[f64]) -> f64 {
    let pairs: Vec<(u32, f64)> = FACTORS.iter().copied().zip(scores.iter().copied()).collect();
    auc(&RobustnessCurve::from_factor_scores(&pairs).unwrap())
}

fn c1_reference_rows() -> Outcome {
    let rows = [([90.7, 87.6, 40.2, 2.0], 63.3), ([90.6, 87.6, 50.4, 2.0], 65.2)];
    let mut got = Vec::new();
    for (scores, expected) in rows {
        let a = curve_auc(&scores);
        ensure!((a - expected).abs() <= 0.5, "{scores:?}: AUC {a:.4}, expected {expected} +- 0.5");
        got.push(format!("{a:.4} vs {expected}"));
    }
    Ok(got.join(", "))
}

fn c2_flat_and_linear() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let v: f64 = rng.random_range(0.0..=100.0);
        let a = curve_auc(&[v; 4]);
        ensure!((a - 0.875 * v).abs() <= 1e-9, "flat {v}: {a}");
    }
    for _ in 0..200 {
        let p: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..=100.0));
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..=100.0));
        let (s, t) = (rng.random_range(0.0..=0.5), rng.random_range(0.0..=0.5));
        let mixed: Vec<f64> = p.iter().zip(&q).map(|(a, b)| s * a + t * b).collect();
        let lhs = curve_auc(&mixed);
        let rhs = s * curve_auc(&p) + t * curve_auc(&q);
        ensure!((lhs - rhs).abs() <= 1e-9, "linearity: {lhs} vs {rhs}");
    }
    Ok("flat curves give 0.875 v; AUC is linear over 200 random pairs".into())
}

fn c3_distortion() -> Outcome {
    let pairs = make_synthetic_cd_fixture(6, 64, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Array3::from_shape_fn((64, 48, 3), |_| rng.random::<f32>());
    ensure!(distort(&noise, 1).unwrap() == noise, "factor 1 changed a noise image");
    for v in [0.0f32, 0.37, 1.0] {
        let flat = Array3::from_elem((64, 64, 3), v);
        for k in [2, 4, 8] {
            let out = distort(&flat, k).unwrap();
            let err = out.iter().fold(0.0f32, |m, x| m.max((x - v).abs()));
            ensure!(err <= 1e-6, "constant {v} at factor {k} moved by {err}");
        }
    }
    let spec = DistortionSpec::default_for(SampleKind::Bitemporal);
    for pair in pairs {
        let sample = Sample::Bitemporal(pair.clone());
        for (k, variant) in build_eval_variants(&sample, &spec).unwrap() {
            let Sample::Bitemporal(v) = variant else { return Err("variant changed kind".into()) };
            ensure!(v.pixels_a == pair.pixels_a, "image A changed at factor {k}");
            ensure!(v.change_mask == pair.change_mask, "change mask changed at factor {k}");
            ensure!((k == 1) == (v.pixels_b == pair.pixels_b), "image B at factor {k}");
        }
    }
    Ok("identity at 1, constants fixed at 2/4/8, A and mask untouched".into())
}

/// Source position of output pixel `(i, j)`'s center, written as the affine
/// map `M * [j + 1/2, i + 1/2, 1]`.
fn source_of_center(c: &CropBox, i: usize, j: usize) -> (f64, f64) {
    let s = c.out_size() as f64;
    let (sx, tx) = if c.hflip() { (-c.w() / s, c.x() + c.w()) } else { (c.w() / s, c.x()) };
    let m = [[sx, 0.0, tx], [0.0, c.h() / s, c.y()]];
    let v = [j as f64 + 0.5, i as f64 + 0.5, 1.0];
    let row = |r: [f64; 3]| r.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    (row(m[0]), row(m[1]))
}

fn random_box(rng: &mut ChaCha8Rng, flip: bool) -> CropBox {
    let w = rng.random_range(8.0..120.0);
    let h = rng.random_range(8.0..120.0);
    let x = rng.random_range(0.0..(160.0 - w));
    let y = rng.random_range(0.0..(160.0 - h));
    CropBox::new(x, y, w, h, rng.random_range(4..=32), flip).unwrap()
}

fn c4_overlap_masks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut pixels, mut agree, mut max_rt) = (0usize, 0usize, 0.0f64);
    for n in 0..200 {
        let flip = n % 2 == 1;
        let c1 = random_box(&mut rng, flip);
        let flip2 = rng.random();
        let c2 = random_box(&mut rng, flip2);
        let mask = rasterize_overlap_mask(&c1, &c2);
        let size = c1.out_size();
        for i in 0..size {
            for j in 0..size {
                let (sx, sy) = source_of_center(&c1, i, j);
                let inside = sx > c2.x() && sx < c2.x() + c2.w() && sy > c2.y() && sy < c2.y() + c2.h();
                pixels += 1;
                agree += usize::from(u8::from(inside) == mask.grid[[i, j]]);
            }
        }
        for _ in 0..10 {
            let p = Point::new(rng.random_range(-50.0..200.0), rng.random_range(-50.0..200.0));
            let back = map_point_from_crop(map_point_to_crop(p, &c1), &c1);
            max_rt = max_rt.max((back.x - p.x).abs()).max((back.y - p.y).abs());
        }
    }
    ensure!(agree == pixels, "{} of {pixels} pixels disagree with the oracle", pixels - agree);
    ensure!(max_rt < 1e-9, "round trip error {max_rt:e}");
    Ok(format!("{pixels} pixels over 200 pairs agree; round trip error {max_rt:.1e}"))
}

fn c5_flops() -> Outcome {
    let b16 = BackboneSpec::vit_b16();
    let g = vit_forward_flops(&b16, 224, FlopConvention::MacAsOne).unwrap();
    ensure!((g - 17.6).abs() <= 1.76, "ViT-B/16 at 224: {g:.3} GFLOPs");
    let at256 = AssemblyConfig::classifier(b16.clone(), 256, 45, PooledBy::ClsToken)
        .flops(FlopConvention::MacAsOne)
        .unwrap();
    ensure!(at256.passed, "classifier at 256 failed the gate: {}", at256.total);
    let big = BackboneSpec { depth: 48, width: 1536, heads: 16, ..b16 };
    let over = AssemblyConfig::classifier(big, 256, 45, PooledBy::ClsToken)
        .flops(FlopConvention::MacAsOne)
        .unwrap();
    ensure!(!over.passed, "oversized classifier passed at {}", over.total);
    Ok(format!("{g:.2} GFLOPs at 224; {:.2} at 256 passes; {:.1} fails", at256.total, over.total))
}

fn pretrain_small(seed: u64) -> PretrainConfig {
    PretrainConfig {
        backbone: BackboneSpec { patch_size: 8, depth: 2, width: 16, heads: 2, mlp_ratio: 2.0, uses_cls_token: true },
        overlap_taps: vec![1, 2],
        neck_channels: 8,
        decoder_channels: 8,
        batch_size: 2,
        epochs: 4,
        seed,
        ..PretrainConfig::desk()
    }
}

fn c6_ema() -> Outcome {
    let cfg = pretrain_small(6);
    let imgs = make_synthetic_scenes(4, 64, 6).unwrap();
    let mut state = PretrainState::new(cfg.clone(), imgs.len()).unwrap();
    let mut worst = 0.0f32;
    for (step, item) in crop_stream(&imgs, &cfg, 3).enumerate() {
        let (ids, crops) = item.unwrap();
        let before = state.teacher.clone();
        let stats = pretrain_step(&mut state, &crops, step, &ids).unwrap();
        ensure!(state.teacher_grad_abs_sum() == 0.0, "teacher gradient at step {step}");
        let m = stats.momentum as f32;
        for (t, b) in state.teacher.params().iter().zip(before.params()) {
            let s = &state.student.param(state.student.id(&t.name).unwrap()).value;
            let expected = &b.value * m + s * (1.0 - m);
            worst = worst.max((&t.value - &expected).iter().fold(0.0f32, |a, v| a.max(v.abs())));
        }
    }
    ensure!(worst <= 1e-7, "EMA recurrence off by {worst:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let store = |v: f32, rng: &mut ChaCha8Rng| {
        let mut s = ParamStore::new();
        let id = s.add("w", &[3], Init::Zeros, rng);
        s.value_mut(id).fill(v);
        s
    };
    let student = store(0.25, &mut rng);
    let mut teacher = store(-1.5, &mut rng);
    ema_update(&mut teacher, &student, 1.0).unwrap();
    ensure!(teacher.params()[0].value.iter().all(|&v| v == -1.5), "m = 1 moved the teacher");
    ema_update(&mut teacher, &student, 0.0).unwrap();
    ensure!(teacher.params()[0].value.iter().all(|&v| v == 0.25), "m = 0 did not copy the student");
    Ok(format!("teacher gradient zero; recurrence error {worst:.1e}; m = 0 and m = 1 exact"))
}

struct CdRun {
    seed: u64,
    scale_aug: bool,
    scores: Vec<f64>,
    auc: f64,
    secs: f64,
}

fn cd_data() -> (Vec<Sample>, Vec<Sample>) {
    let wrap = |v: Vec<_>| v.into_iter().map(Sample::Bitemporal).collect::<Vec<_>>();
    (
        wrap(make_synthetic_cd_fixture(500, 64, 0).unwrap()),
        wrap(make_synthetic_cd_fixture(100, 64, 1000).unwrap()),
    )
}

fn run_cd(train: &[Sample], test: &[Sample], seed: u64, scale_aug: bool) -> Result<CdRun, String> {
    let spec = BackboneSpec::tiny();
    let taps = default_taps(spec.depth);
    let mut model = build_change_detector(spec, 64, Fusion::Subtract, taps, seed).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 5, seed, scale_aug, ..TrainConfig::desk_change_detection() };
    let dspec = DistortionSpec::default_for(SampleKind::Bitemporal);
    let start = Instant::now();
    let (_, manifest) = finetune_and_evaluate(&mut model, train, test, &cfg, &dspec).map_err(|e| e.to_string())?;
    let run = CdRun {
        seed,
        scale_aug,
        scores: manifest.results.per_scale.iter().map(|p| p.score).collect(),
        auc: manifest.results.auc.unwrap_or(f64::NAN),
        secs: start.elapsed().as_secs_f64(),
    };
    println!(
        "  cd seed {} aug {}: F1 {:?} AUC {:.2} in {:.0}s",
        run.seed,
        run.scale_aug,
        run.scores.iter().map(|s| (s * 10.0).round() / 10.0).collect::<Vec<_>>(),
        run.auc,
        run.secs
    );
    Ok(run)
}

fn c7_tiny_cd(plain: &[CdRun]) -> Outcome {
    ensure!(plain.len() == SEEDS.len(), "only {} of {} runs finished", plain.len(), SEEDS.len());
    for r in plain {
        ensure!(r.scores[0] >= 85.0, "seed {}: F1 {:.2} at 1:1", r.seed, r.scores[0]);
        ensure!(r.secs < 15.0 * 60.0, "seed {}: {:.0}s", r.seed, r.secs);
    }
    let f1: Vec<String> = plain.iter().map(|r| format!("{:.1}", r.scores[0])).collect();
    let slowest = plain.iter().map(|r| r.secs).fold(0.0, f64::max);
    Ok(format!("F1 at 1:1 {} over seeds; slowest run {slowest:.0}s", f1.join("/")))
}

fn c8_scale_aug(plain: &[CdRun], aug: &[CdRun]) -> Outcome {
    ensure!(plain.len() == SEEDS.len() && aug.len() == SEEDS.len(), "missing runs");
    let mut gains = Vec::new();
    for (p, a) in plain.iter().zip(aug) {
        ensure!(a.auc > p.auc, "seed {}: AUC {:.2} with aug vs {:.2} without", p.seed, a.auc, p.auc);
        for idx in [2, 3] {
            let drop_plain = p.scores[0] - p.scores[idx];
            let drop_aug = a.scores[0] - a.scores[idx];
            ensure!(
                drop_plain > drop_aug,
                "seed {}: drop at 1:{} is {drop_plain:.2} without aug, {drop_aug:.2} with",
                p.seed,
                FACTORS[idx]
            );
        }
        gains.push(format!("{:+.2}", a.auc - p.auc));
    }
    Ok(format!("AUC gain {} over seeds; steeper drops without aug at 1:4 and 1:8", gains.join("/")))
}

fn c9_freeze() -> Outcome {
    let spec = BackboneSpec::tiny();
    let mut model = build_change_detector(spec.clone(), 64, Fusion::Subtract, default_taps(spec.depth), 9)
        .map_err(|e| e.to_string())?;
    let data: Vec<Sample> = make_synthetic_cd_fixture(16, 64, 9).unwrap().into_iter().map(Sample::Bitemporal).collect();
    let cfg = TrainConfig { epochs: 1, freeze_backbone: true, seed: 9, ..TrainConfig::desk_change_detection() };
    let opt = make_optimizer(&model, &cfg);
    let before = model.store.clone();
    for (i, p) in before.params().iter().enumerate() {
        ensure!(opt.is_trainable(i) != ModelAssembly::is_backbone_param(&p.name), "{} trainability", p.name);
    }
    let report = finetune(&mut model, &data, &cfg).map_err(|e| e.to_string())?;
    let mut head_moved = false;
    for (now, then) in model.store.params().iter().zip(before.params()) {
        if ModelAssembly::is_backbone_param(&now.name) {
            ensure!(now.value == then.value, "{} moved while frozen", now.name);
        } else {
            head_moved |= now.value != then.value;
        }
    }
    ensure!(head_moved, "no head parameter moved");
    Ok(format!("backbone bitwise unchanged; {} head tensors trained", report.trainable_tensors))
}

fn last20_overlap(seed: u64, images: &[Array3<f32>]) -> Result<f64, String> {
    let cfg = PretrainConfig { max_steps: Some(200), seed, ..PretrainConfig::desk() };
    let out = pretrain(images, cfg, None, |_| {}).map_err(|e| e.to_string())?;
    ensure!(out.log.len() == 200, "{} steps", out.log.len());
    Ok(out.log.iter().rev().take(20).map(|s| s.overlap_loss).sum::<f64>() / 20.0)
}

fn c10_pretrain() -> Outcome {
    let images = make_synthetic_scenes(64, 64, 3).unwrap();
    let ln2 = std::f64::consts::LN_2;
    let mut tails = Vec::new();
    for seed in SEEDS {
        let tail = last20_overlap(seed, &images)?;
        println!("  pretrain seed {seed}: last-20 overlap loss {tail:.4}");
        ensure!(tail < ln2, "seed {seed}: last-20 overlap loss {tail:.4} >= ln 2");
        tails.push(format!("{tail:.3}"));
    }
    let cfg = PretrainConfig { overlap_features: OverlapFeatures::StudentOnly, ..pretrain_small(10) };
    let small = make_synthetic_scenes(2, 64, 10).unwrap();
    let mut state = PretrainState::new(cfg.clone(), small.len()).map_err(|e| e.to_string())?;
    let (ids, crops) = crop_stream(&small, &cfg, 1).next().unwrap().map_err(|e| e.to_string())?;
    let stats = pretrain_step(&mut state, &crops, 0, &ids).map_err(|e| e.to_string())?;
    ensure!(stats.overlap_loss.is_finite(), "student-only overlap loss {}", stats.overlap_loss);
    Ok(format!("last-20 overlap loss {} < ln 2; student-only variant runs", tails.join("/")))
}

fn c11_determinism() -> Outcome {
    let wrap = |n, seed| -> Vec<Sample> {
        make_synthetic_cd_fixture(n, 32, seed).unwrap().into_iter().map(Sample::Bitemporal).collect()
    };
    let (train, test) = (wrap(16, 21), wrap(8, 22));
    let spec = BackboneSpec { patch_size: 8, depth: 2, width: 16, heads: 2, mlp_ratio: 2.0, uses_cls_token: true };
    let cfg = TrainConfig { epochs: 2, batch_size: 4, scale_aug: true, seed: 11, ..TrainConfig::desk_change_detection() };
    let dspec = DistortionSpec::default_for(SampleKind::Bitemporal);
    let run = || -> Result<RunManifest, String> {
        let mut m = build_change_detector(spec.clone(), 32, Fusion::Subtract, vec![1, 2], 11).map_err(|e| e.to_string())?;
        finetune_and_evaluate(&mut m, &train, &test, &cfg, &dspec).map(|r| r.1).map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    ensure!(a.results.digest() == b.results.digest(), "results digests differ");
    ensure!(a.config == b.config, "configs differ");
    ensure!(a.dataset == b.dataset, "dataset fingerprints differ");
    Ok(format!("results digest {} repeats", &a.results.digest()[..16]))
}

#[test]
fn acceptance() {
    let mut outcomes: Vec<(usize, &str, Outcome)> = vec![
        (1, "AUC of reference rows", c1_reference_rows()),
        (2, "flat curve and linearity", c2_flat_and_linear()),
        (3, "distortion identities", c3_distortion()),
        (4, "overlap mask oracle", c4_overlap_masks()),
        (5, "FLOPs gate", c5_flops()),
        (6, "EMA teacher", c6_ema()),
    ];

    let (train, test) = cd_data();
    let mut plain = Vec::new();
    let mut aug = Vec::new();
    let mut cd_error = None;
    for seed in SEEDS {
        for (flag, into) in [(false, &mut plain), (true, &mut aug)] {
            match run_cd(&train, &test, seed, flag) {
                Ok(r) => into.push(r),
                Err(e) => cd_error = Some(e),
            }
        }
    }
    let with_err = |o: Outcome| match (&cd_error, o) {
        (Some(e), Err(m)) => Err(format!("{m}; {e}")),
        (_, o) => o,
    };
    outcomes.push((7, "tiny change detector", with_err(c7_tiny_cd(&plain))));
    outcomes.push((8, "scale augmentation", with_err(c8_scale_aug(&plain, &aug))));
    outcomes.push((9, "frozen backbone", c9_freeze()));
    outcomes.push((10, "overlap pretraining", c10_pretrain()));
    outcomes.push((11, "reproducible manifests", c11_determinism()));

    // Written to the process stdout so the summary shows without --nocapture.
    let mut out = std::io::stdout().lock();
    writeln!(out).unwrap();
    for (n, name, o) in &outcomes {
        match o {
            Ok(detail) => writeln!(out, "[PASS] criterion {n} {name}: {detail}"),
            Err(why) => writeln!(out, "[FAIL] criterion {n} {name}: {why}"),
        }
        .unwrap();
    }
    drop(out);
    let failed: Vec<usize> = outcomes.iter().filter(|(_, _, o)| o.is_err()).map(|(n, _, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
