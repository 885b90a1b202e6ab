//! Teacher-student self-distillation with an overlap-mask decoder branch.
//!
//! The student sees every crop; the EMA teacher sees the global crops and
//! never receives gradient. The overlap branch concatenates tap features of
//! the first global crop (student) and the second global crop (teacher by
//! default) and predicts, in the first crop's frame, which pixels the second
//! crop covers.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use scalebench_core::flops::{BackboneSpec, FlopsError};
use scalebench_core::geometry::{rasterize_overlap_mask, CropBox};
use scalebench_nn::checkpoint::{self, CheckpointError};
use scalebench_nn::layers::spatial::rows;
use scalebench_nn::layers::Linear;
use scalebench_nn::loss::{cross_entropy, soft_cross_entropy, softmax_rows};
use scalebench_nn::{clip_grad_norm, cosine_ramp, AdamW, GroupConfig, ParamStore, Schedule};

use crate::assembly::{stack_images, AssemblyError, BACKBONE_PREFIX};
use crate::crops::{make_crops, CropBatch, CropConfig, CropError};
use crate::pyramid::{concat_channels, level_stride, split_channels, Neck, PyramidDecoder};
use crate::vit::VisionTransformer;

pub const OVERLAP_PREFIX: &str = "overlap";
const FORMAT: &str = "scalebench-pretrain-v1";

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("invalid pretraining config: {0}")]
    Config(String),
    #[error("teacher and student differ: {0}")]
    Structure(String),
    #[error("overlap features disagree: {0}")]
    GridMismatch(String),
    #[error("no pretraining images")]
    EmptyDataset,
    #[error("non-finite loss at step {step} (batch {batch_id}, images {images:?}): overlap={overlap}, distill={distill}, grad_norm={grad_norm}")]
    NonFinite { step: usize, batch_id: usize, images: Vec<usize>, overlap: f64, distill: f64, grad_norm: f64 },
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Flops(#[from] FlopsError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Which network supplies the second crop's features to the overlap decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapFeatures {
    /// Student for crop 1, stop-gradient teacher for crop 2.
    StudentTeacher,
    /// Student for both crops (reported to train unstably).
    StudentOnly,
}

/// The token-level distillation objective that runs next to the overlap loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistillSlot {
    /// No distillation term; only the overlap branch trains the student.
    Zero,
    /// Class-token self-distillation: a projection head, a centered and
    /// sharpened teacher distribution over the global crops, and a
    /// cross-entropy for every student crop against every other global crop.
    DinoCls { out_dim: usize, student_temp: f32, teacher_temp: f32, center_momentum: f32 },
}

impl DistillSlot {
    pub fn dino() -> Self {
        DistillSlot::DinoCls { out_dim: 256, student_temp: 0.1, teacher_temp: 0.04, center_momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub backbone: BackboneSpec,
    pub crops: CropConfig,
    pub scale_aug: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Stop after this many steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub backbone_peak_lr: f64,
    pub backbone_final_lr: f64,
    pub decoder_peak_lr: f64,
    pub decoder_final_lr: f64,
    pub weight_decay: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    /// Weight of the overlap loss in the total.
    pub overlap_weight: f64,
    pub overlap_features: OverlapFeatures,
    pub overlap_taps: Vec<usize>,
    pub neck_channels: usize,
    pub decoder_channels: usize,
    pub distill: DistillSlot,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Write checkpoints every this many steps (and always at the end).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::vit_b16(),
            crops: CropConfig::default(),
            scale_aug: false,
            batch_size: 64,
            epochs: 200,
            warmup_epochs: 5,
            max_steps: None,
            backbone_peak_lr: 5e-4,
            backbone_final_lr: 2e-6,
            decoder_peak_lr: 2.5e-4,
            decoder_final_lr: 0.0,
            weight_decay: 0.04,
            momentum_start: 0.996,
            momentum_end: 1.0,
            overlap_weight: 1.0,
            overlap_features: OverlapFeatures::StudentTeacher,
            overlap_taps: vec![3, 5, 8, 12],
            neck_channels: 128,
            decoder_channels: 128,
            distill: DistillSlot::dino(),
            grad_clip: Some(3.0),
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl PretrainConfig {
    /// Tiny backbone, small crops and a short schedule for CPU runs: 64
    /// tiles make 200 steps.
    pub fn desk() -> Self {
        let backbone = BackboneSpec::tiny();
        Self {
            overlap_taps: crate::assembly::default_taps(backbone.depth),
            backbone,
            crops: CropConfig::desk(),
            batch_size: 16,
            epochs: 50,
            decoder_peak_lr: 1e-3,
            neck_channels: 32,
            decoder_channels: 32,
            distill: DistillSlot::Zero,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: String| Err(PretrainError::Config(m));
        self.backbone.validate()?;
        self.crops.validate()?;
        let p = self.backbone.patch_size;
        let g = self.backbone.grid_side(self.crops.global_size)?;
        self.backbone.grid_side(self.crops.local_size)?;
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.overlap_taps.is_empty() || self.overlap_taps.iter().any(|&t| t == 0 || t > self.backbone.depth) {
            return bad(format!("overlap taps must be a nonempty subset of 1..={}", self.backbone.depth));
        }
        if !p.is_power_of_two() {
            return bad("the overlap neck needs a power-of-two patch size".into());
        }
        let coarsest = level_stride(self.overlap_taps.len() - 1);
        if coarsest > p && g % (coarsest / p) != 0 {
            return bad(format!("global crop grid {g} cannot be pooled to stride {coarsest}"));
        }
        if !(0.0..=1.0).contains(&self.momentum_start) || !(0.0..=1.0).contains(&self.momentum_end) {
            return bad("EMA momentum must lie in [0, 1]".into());
        }
        if self.overlap_weight < 0.0 {
            return bad("overlap_weight must be non-negative".into());
        }
        if self.backbone_peak_lr <= 0.0 || self.decoder_peak_lr <= 0.0 {
            return bad("peak learning rates must be positive".into());
        }
        if let DistillSlot::DinoCls { out_dim, student_temp, teacher_temp, center_momentum } = self.distill {
            if !self.backbone.uses_cls_token {
                return bad("class-token distillation needs a backbone with a class token".into());
            }
            if out_dim == 0 || student_temp <= 0.0 || teacher_temp <= 0.0 || !(0.0..=1.0).contains(&center_momentum) {
                return bad("invalid distillation head settings".into());
            }
        }
        Ok(())
    }
}

/// `t <- m * t + (1 - m) * s` for every teacher tensor, matched by name.
/// Student tensors without a teacher counterpart (the overlap branch) are
/// ignored; a missing or differently shaped counterpart is an error.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, momentum: f64) -> Result<(), PretrainError> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(PretrainError::Config(format!("momentum {momentum} outside [0, 1]")));
    }
    for t in teacher.params() {
        let id = student
            .id(&t.name)
            .ok_or_else(|| PretrainError::Structure(format!("student has no tensor {}", t.name)))?;
        let s = &student.param(id).value;
        if s.shape() != t.value.shape() {
            return Err(PretrainError::Structure(format!(
                "{}: teacher {:?} vs student {:?}",
                t.name,
                t.value.shape(),
                s.shape()
            )));
        }
    }
    let m = momentum as f32;
    let keep = 1.0 - m;
    for t in teacher.params_mut() {
        let id = student.id(&t.name).expect("checked above");
        Zip::from(&mut t.value).and(&student.param(id).value).for_each(|tv, &sv| *tv = m * *tv + keep * sv);
    }
    Ok(())
}

/// Neck and pyramid decoder over channel-concatenated features of two crops.
#[derive(Debug, Clone)]
pub struct OverlapBranch {
    neck: Neck,
    decoder: PyramidDecoder,
    pub taps: Vec<usize>,
    pub width: usize,
}

/// Loss of the overlap branch plus gradients with respect to both crops'
/// feature maps (per tap). Whether `d_crop2` is used is the caller's call.
#[derive(Debug, Clone)]
pub struct OverlapOutput {
    pub loss: f32,
    pub logits: Array4<f32>,
    pub targets: Vec<Array2<u8>>,
    pub d_crop1: Vec<Array4<f32>>,
    pub d_crop2: Vec<Array4<f32>>,
}

impl OverlapBranch {
    pub fn new(
        s: &mut ParamStore,
        prefix: &str,
        spec: &BackboneSpec,
        taps: Vec<usize>,
        neck_channels: usize,
        decoder_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let n = taps.len();
        let neck = Neck::new(s, &format!("{prefix}.neck"), 2 * spec.width, neck_channels, spec.patch_size, n, rng);
        let decoder = PyramidDecoder::new(s, &format!("{prefix}.decoder"), neck_channels, decoder_channels, n, 2, rng);
        Self { neck, decoder, taps, width: spec.width }
    }

    pub fn decoder(&self) -> &PyramidDecoder {
        &self.decoder
    }
}

/// Pixel-wise cross-entropy of the overlap decoder against the rasterized
/// overlap of each `(c1, c2)` pair, in `c1`'s output frame. Parameter
/// gradients of the branch accumulate into `store`.
pub fn overlap_branch_loss(
    branch: &OverlapBranch,
    store: &mut ParamStore,
    feats_crop1: &[Array4<f32>],
    feats_crop2: &[Array4<f32>],
    c1: &[CropBox],
    c2: &[CropBox],
) -> Result<OverlapOutput, PretrainError> {
    let n = branch.taps.len();
    if feats_crop1.len() != n || feats_crop2.len() != n {
        return Err(PretrainError::GridMismatch(format!(
            "expected {n} tap maps per crop, got {} and {}",
            feats_crop1.len(),
            feats_crop2.len()
        )));
    }
    for (a, b) in feats_crop1.iter().zip(feats_crop2) {
        if a.dim() != b.dim() {
            return Err(PretrainError::GridMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
        }
    }
    let batch = feats_crop1[0].dim().0;
    if c1.len() != batch || c2.len() != batch {
        return Err(PretrainError::GridMismatch(format!("{batch} feature maps but {}/{} crop boxes", c1.len(), c2.len())));
    }
    let side = c1[0].out_size();
    if c1.iter().any(|c| c.out_size() != side) {
        return Err(PretrainError::GridMismatch("first crops differ in output size".into()));
    }

    let fused: Vec<Array4<f32>> =
        feats_crop1.iter().zip(feats_crop2).map(|(a, b)| concat_channels(&[a.clone(), b.clone()])).collect();
    let (levels, neck_cache) = branch.neck.forward(store, &fused);
    let (logits, dec_cache) = branch.decoder.forward(store, &levels, side, side);

    let targets: Vec<Array2<u8>> = c1.iter().zip(c2).map(|(a, b)| rasterize_overlap_mask(a, b).grid).collect();
    let flat: Vec<usize> = targets.iter().flat_map(|t| t.iter().map(|&v| usize::from(v))).collect();
    let (loss, grad) = cross_entropy(rows(&logits), &flat, None);
    let d_logits = grad.into_shape_with_order((batch, side, side, 2)).expect("row-major logits");

    let d_levels = branch.decoder.backward(store, &dec_cache, &d_logits);
    let d_fused = branch.neck.backward(store, &neck_cache, d_levels);
    let mut d_crop1 = Vec::with_capacity(n);
    let mut d_crop2 = Vec::with_capacity(n);
    for d in d_fused {
        let mut parts = split_channels(&d, &[branch.width, branch.width]).into_iter();
        d_crop1.push(parts.next().expect("two halves"));
        d_crop2.push(parts.next().expect("two halves"));
    }
    Ok(OverlapOutput { loss, logits, targets, d_crop1, d_crop2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub batch_id: usize,
    pub total_loss: f64,
    pub overlap_loss: f64,
    pub distill_loss: f64,
    pub lr_backbone: f64,
    pub lr_decoder: f64,
    pub momentum: f64,
    pub grad_norm: f64,
}

impl StepStats {
    pub const CSV_HEADER: &'static str =
        "step,batch_id,total_loss,overlap_loss,distill_loss,lr_backbone,lr_decoder,momentum,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.batch_id,
            self.total_loss,
            self.overlap_loss,
            self.distill_loss,
            self.lr_backbone,
            self.lr_decoder,
            self.momentum,
            self.grad_norm
        )
    }
}

/// Everything a pretraining run mutates.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub config: PretrainConfig,
    pub student: ParamStore,
    pub teacher: ParamStore,
    vit: VisionTransformer,
    head: Option<Linear>,
    pub overlap: OverlapBranch,
    opt: AdamW,
    center: Option<Array1<f32>>,
    step: usize,
    steps_per_epoch: usize,
}

impl PretrainState {
    /// Initializes the student from the seed, copies it into the teacher,
    /// then adds the overlap branch to the student only.
    pub fn new(config: PretrainConfig, n_images: usize) -> Result<Self, PretrainError> {
        config.validate()?;
        if n_images == 0 {
            return Err(PretrainError::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut student = ParamStore::new();
        let vit = VisionTransformer::new(&mut student, BACKBONE_PREFIX, &config.backbone, config.crops.global_size, &mut rng);
        let head = match config.distill {
            DistillSlot::Zero => None,
            DistillSlot::DinoCls { out_dim, .. } => {
                Some(Linear::new(&mut student, "dino_head", config.backbone.width, out_dim, &mut rng))
            }
        };
        let teacher = student.clone();
        let overlap = OverlapBranch::new(
            &mut student,
            OVERLAP_PREFIX,
            &config.backbone,
            config.overlap_taps.clone(),
            config.neck_channels,
            config.decoder_channels,
            &mut rng,
        );
        let opt = AdamW::new(
            &student,
            vec![
                GroupConfig { lr: config.backbone_peak_lr, weight_decay: config.weight_decay },
                GroupConfig { lr: config.decoder_peak_lr, weight_decay: config.weight_decay },
            ],
            |name| Some(usize::from(name.starts_with(&format!("{OVERLAP_PREFIX}.")))),
        );
        let center = match config.distill {
            DistillSlot::DinoCls { out_dim, .. } => Some(Array1::zeros(out_dim)),
            DistillSlot::Zero => None,
        };
        let steps_per_epoch = n_images.div_ceil(config.batch_size);
        Ok(Self { config, student, teacher, vit, head, overlap, opt, center, step: 0, steps_per_epoch })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        let full = self.steps_per_epoch * self.config.epochs;
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    fn schedule_span(&self) -> (usize, usize) {
        (self.config.warmup_epochs * self.steps_per_epoch, self.steps_per_epoch * self.config.epochs)
    }

    pub fn lr_backbone(&self, step: usize) -> f64 {
        let (warmup, total) = self.schedule_span();
        let c = &self.config;
        Schedule::WarmupLinear { base: c.backbone_peak_lr, last: c.backbone_final_lr, warmup, total }.at(step)
    }

    pub fn lr_decoder(&self, step: usize) -> f64 {
        let (warmup, total) = self.schedule_span();
        let c = &self.config;
        Schedule::WarmupCosine { base: c.decoder_peak_lr, last: c.decoder_final_lr, warmup, total }.at(step)
    }

    pub fn momentum(&self, step: usize) -> f64 {
        let (_, total) = self.schedule_span();
        cosine_ramp(self.config.momentum_start, self.config.momentum_end, step, total)
    }

    pub fn backbone(&self) -> &VisionTransformer {
        &self.vit
    }

    /// Sum of absolute teacher gradients; zero unless something leaked.
    pub fn teacher_grad_abs_sum(&self) -> f64 {
        self.teacher.params().iter().flat_map(|p| p.grad.iter()).map(|g| g.abs() as f64).sum()
    }

    /// Writes student and teacher checkpoints for the current step.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>, PretrainError> {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        let mut out = Vec::new();
        for (role, store) in [("student", &self.student), ("teacher", &self.teacher)] {
            let path = dir.join(format!("{role}_step{:06}.safetensors", self.step));
            let meta = HashMap::from([
                ("format".to_string(), FORMAT.to_string()),
                ("role".to_string(), role.to_string()),
                ("step".to_string(), self.step.to_string()),
                ("pretrain_config".to_string(), cfg.clone()),
            ]);
            checkpoint::save(store, &path, meta)?;
            out.push(path);
        }
        Ok(out)
    }
}

/// Centered, sharpened teacher distribution and the summed student
/// cross-entropy over all (global teacher view, other student view) pairs.
struct Distill {
    loss: f32,
    /// Gradients on the student class tokens: globals `(2b, d)`, locals `(nl*b, d)`.
    d_global: Array2<f32>,
    d_local: Option<Array2<f32>>,
    teacher_mean: Array1<f32>,
}

#[allow(clippy::too_many_arguments)]
fn distill_cls(
    head: &Linear,
    student: &mut ParamStore,
    teacher: &ParamStore,
    s_global: &Array2<f32>,
    s_local: Option<&Array2<f32>>,
    t_global: &Array2<f32>,
    center: &Array1<f32>,
    temps: (f32, f32),
    n_global: usize,
) -> Distill {
    let (ts, tt) = temps;
    let b = s_global.nrows() / n_global;
    let t_logits = head.forward(teacher, t_global.view());
    let teacher_mean = t_logits.mean_axis(Axis(0)).expect("nonempty batch");
    let q = softmax_rows(((&t_logits - center) / tt).view());

    let s_all = match s_local {
        Some(l) => ndarray::concatenate(Axis(0), &[s_global.view(), l.view()]).expect("same width"),
        None => s_global.clone(),
    };
    let s_logits = head.forward(student, s_all.view());
    let n_views = s_all.nrows() / b;
    let mut d_logits = Array2::<f32>::zeros(s_logits.raw_dim());
    let mut loss = 0.0f32;
    let mut pairs = 0usize;
    for iq in 0..n_global {
        let target = q.slice(s![iq * b..(iq + 1) * b, ..]);
        for v in (0..n_views).filter(|&v| v != iq) {
            let sv = s_logits.slice(s![v * b..(v + 1) * b, ..]).mapv(|x| x / ts);
            let (l, g) = soft_cross_entropy(sv.view(), target);
            loss += l;
            pairs += 1;
            let mut dst = d_logits.slice_mut(s![v * b..(v + 1) * b, ..]);
            dst.scaled_add(1.0 / ts, &g);
        }
    }
    let scale = 1.0 / pairs as f32;
    d_logits *= scale;
    let d_cls = head.backward(student, s_all.view(), d_logits.view());
    let n_g = s_global.nrows();
    let d_global = d_cls.slice(s![..n_g, ..]).to_owned();
    let d_local = s_local.map(|_| d_cls.slice(s![n_g.., ..]).to_owned());
    Distill { loss: loss * scale, d_global, d_local, teacher_mean }
}

/// Puts per-sequence class-token gradients into a full token gradient.
fn cls_token_grad(d_cls: &Array2<f32>, seq_len: usize) -> Array2<f32> {
    let (b, d) = d_cls.dim();
    let mut out = Array2::zeros((b * seq_len, d));
    for i in 0..b {
        out.row_mut(i * seq_len).assign(&d_cls.row(i));
    }
    out
}

/// One optimization step on a batch of crop sets: forward passes, overlap
/// and distillation losses, one optimizer step and one EMA update.
pub fn pretrain_step(
    state: &mut PretrainState,
    batch: &[CropBatch],
    batch_id: usize,
    image_ids: &[usize],
) -> Result<StepStats, PretrainError> {
    let b = batch.len();
    if b == 0 {
        return Err(PretrainError::EmptyDataset);
    }
    let step = state.step;
    let lr_b = state.lr_backbone(step);
    let lr_d = state.lr_decoder(step);
    let momentum = state.momentum(step);
    let cfg = state.config.clone();
    let taps = state.overlap.taps.clone();
    let n_global = cfg.crops.n_global;

    let globals: Vec<&Array3<f32>> =
        (0..n_global).flat_map(|g| batch.iter().map(move |c| &c.global[g].pixels)).collect();
    let globals = stack_images(globals)?;
    let c1: Vec<CropBox> = batch.iter().map(|c| c.global[0].bbox).collect();
    let c2: Vec<CropBox> = batch.iter().map(|c| c.global[1].bbox).collect();

    state.student.zero_grad();
    let s_out = state.vit.forward(&state.student, &globals, &taps);
    let need_teacher = cfg.overlap_features == OverlapFeatures::StudentTeacher || state.head.is_some();
    let t_out = need_teacher.then(|| state.vit.forward(&state.teacher, &globals, &taps));

    let crop_slice = |m: Array4<f32>, k: usize| m.slice(s![k * b..(k + 1) * b, .., .., ..]).to_owned();
    let mut f1 = Vec::with_capacity(taps.len());
    let mut f2 = Vec::with_capacity(taps.len());
    for &t in &taps {
        f1.push(crop_slice(s_out.tap_map(t).expect("tap recorded"), 0));
        let second = match (&cfg.overlap_features, &t_out) {
            (OverlapFeatures::StudentTeacher, Some(t_out)) => t_out.tap_map(t).expect("tap recorded"),
            _ => s_out.tap_map(t).expect("tap recorded"),
        };
        f2.push(crop_slice(second, 1));
    }
    let ov = overlap_branch_loss(&state.overlap, &mut state.student, &f1, &f2, &c1, &c2)?;
    let lambda = cfg.overlap_weight as f32;
    if lambda != 1.0 {
        for p in state.student.params_mut().iter_mut().filter(|p| p.name.starts_with(&format!("{OVERLAP_PREFIX}."))) {
            p.grad *= lambda;
        }
    }

    let (gh, gw) = s_out.grid;
    let d = cfg.backbone.width;
    let mut d_taps = BTreeMap::new();
    for (i, &t) in taps.iter().enumerate() {
        let mut full = Array4::<f32>::zeros((n_global * b, gh, gw, d));
        full.slice_mut(s![..b, .., .., ..]).scaled_add(lambda, &ov.d_crop1[i]);
        if cfg.overlap_features == OverlapFeatures::StudentOnly {
            full.slice_mut(s![b..2 * b, .., .., ..]).scaled_add(lambda, &ov.d_crop2[i]);
        }
        d_taps.insert(t, rows(&full).to_owned());
    }

    let mut distill_loss = 0.0f32;
    let mut d_tokens = None;
    if let (Some(head), DistillSlot::DinoCls { student_temp, teacher_temp, center_momentum, .. }) =
        (&state.head, &cfg.distill)
    {
        let locals: Vec<&Array3<f32>> =
            (0..cfg.crops.n_local).flat_map(|l| batch.iter().map(move |c| &c.local[l].pixels)).collect();
        let l_out = (!locals.is_empty()).then(|| -> Result<_, PretrainError> {
            Ok(state.vit.forward(&state.student, &stack_images(locals)?, &[]))
        });
        let l_out = l_out.transpose()?;
        let t_out = t_out.as_ref().expect("teacher pass runs with distillation");
        let center = state.center.as_ref().expect("center exists with distillation");
        let dist = distill_cls(
            head,
            &mut state.student,
            &state.teacher,
            &s_out.cls(),
            l_out.as_ref().map(|o| o.cls()).as_ref(),
            &t_out.cls(),
            center,
            (*student_temp, *teacher_temp),
            n_global,
        );
        distill_loss = dist.loss;
        if let (Some(l_out), Some(dl)) = (&l_out, &dist.d_local) {
            state.vit.backward(&mut state.student, l_out, Some(&cls_token_grad(dl, l_out.seq_len())), &BTreeMap::new());
        }
        d_tokens = Some(cls_token_grad(&dist.d_global, s_out.seq_len()));
        let c = state.center.as_mut().expect("center exists with distillation");
        c.zip_mut_with(&dist.teacher_mean, |c, &m| *c = center_momentum * *c + (1.0 - center_momentum) * m);
    }
    state.vit.backward(&mut state.student, &s_out, d_tokens.as_ref(), &d_taps);

    let total = distill_loss as f64 + cfg.overlap_weight * ov.loss as f64;
    let grad_norm = match cfg.grad_clip {
        Some(c) => clip_grad_norm(&mut state.student, c),
        None => state.student.grad_norm(),
    };
    if !total.is_finite() || !grad_norm.is_finite() {
        return Err(PretrainError::NonFinite {
            step,
            batch_id,
            images: image_ids.to_vec(),
            overlap: ov.loss as f64,
            distill: distill_loss as f64,
            grad_norm,
        });
    }
    state.opt.set_lr(0, lr_b);
    state.opt.set_lr(1, lr_d);
    state.opt.step(&mut state.student);
    ema_update(&mut state.teacher, &state.student, momentum)?;
    state.step += 1;
    Ok(StepStats {
        step,
        batch_id,
        total_loss: total,
        overlap_loss: ov.loss as f64,
        distill_loss: distill_loss as f64,
        lr_backbone: lr_b,
        lr_decoder: lr_d,
        momentum,
        grad_norm,
    })
}

/// Batches of crop sets in run order: a fresh image shuffle per epoch and
/// crops drawn from a stream derived from the seed.
pub fn crop_stream<'a>(
    images: &'a [Array3<f32>],
    config: &'a PretrainConfig,
    total_steps: usize,
) -> impl Iterator<Item = Result<(Vec<usize>, Vec<CropBatch>), PretrainError>> + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    (0..total_steps).map(move |_| {
        if cursor >= order.len() {
            order = (0..images.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let ids = order[cursor..end].to_vec();
        cursor = end;
        let crops = ids
            .iter()
            .map(|&i| make_crops(&images[i], &config.crops, config.scale_aug, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((ids, crops))
    })
}

pub struct PretrainOutcome {
    pub state: PretrainState,
    pub log: Vec<StepStats>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs the full schedule. With `out_dir`, appends every step to
/// `pretrain_log.csv` and writes checkpoints there.
pub fn pretrain(
    images: &[Array3<f32>],
    config: PretrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepStats),
) -> Result<PretrainOutcome, PretrainError> {
    let mut state = PretrainState::new(config, images.len())?;
    let total = state.total_steps();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PretrainError::Io { path, source }
    };
    let mut log_file = match out_dir {
        Some(dir) => {
            let path = dir.join("pretrain_log.csv");
            let mut f = OpenOptions::new().create_new(true).append(true).open(&path).map_err(io(&path))?;
            writeln!(f, "{}", StepStats::CSV_HEADER).map_err(io(&path))?;
            Some((f, path))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(total);
    let mut checkpoints = Vec::new();
    let config = state.config.clone();

    std::thread::scope(|scope| -> Result<(), PretrainError> {
        let (tx, rx) = sync_channel(2);
        let cfg = &config;
        scope.spawn(move || {
            for item in crop_stream(images, cfg, total) {
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });
        for (batch_id, item) in rx.into_iter().enumerate() {
            let (ids, crops) = item?;
            let stats = pretrain_step(&mut state, &crops, batch_id, &ids)?;
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", stats.csv_row()).map_err(io(path))?;
            }
            on_step(&stats);
            log.push(stats);
            if let (Some(dir), Some(every)) = (out_dir, config.checkpoint_every) {
                if state.step % every == 0 && state.step < total {
                    checkpoints.extend(state.save(dir)?);
                }
            }
        }
        Ok(())
    })?;
    if let Some(dir) = out_dir {
        checkpoints.extend(state.save(dir)?);
    }
    Ok(PretrainOutcome { state, log, checkpoints })
}
