//! Task assemblies: backbone plus classification head, or Siamese backbone
//! plus neck and pyramid decoder for change detection.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use scalebench_core::flops::{
    gate, linear_flops, vit_forward_breakdown, BackboneSpec, Component, FlopConvention, FlopsError,
    FlopsReport, Task,
};
use scalebench_core::metrics::{PredictError, Prediction, Predictor};
use scalebench_core::sample::{Sample, SampleKind};
use scalebench_nn::checkpoint::{self, Checkpoint, CheckpointError, LoadReport};
use scalebench_nn::layers::spatial::{from_rows, rows};
use scalebench_nn::layers::Linear;
use scalebench_nn::ParamStore;

use crate::pyramid::{concat_channels, decoder_macs, level_stride, neck_macs, split_channels, DecoderCache, Neck, NeckCache, PyramidDecoder};
use crate::vit::{VisionTransformer, VitOutput};

pub const BACKBONE_PREFIX: &str = "backbone";
const FORMAT: &str = "scalebench-assembly-v1";

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("invalid assembly: {0}")]
    Invalid(String),
    #[error(transparent)]
    Flops(#[from] FlopsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint was written for a different assembly:\n  stored:   {stored}\n  expected: {expected}")]
    ConfigMismatch { stored: String, expected: String },
    #[error("{0} is not an assembly checkpoint")]
    NotAnAssembly(String),
    #[error("input batch: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `features(a) - features(b)`.
    Subtract,
    /// `[features(a), features(b)]` along channels.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PooledBy {
    ClsToken,
    GlobalAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadConfig {
    LinearCls {
        num_classes: usize,
        pooled_by: PooledBy,
    },
    PyramidMaskDecoder {
        fusion: Fusion,
        tap_layers: Vec<usize>,
        neck_channels: usize,
        decoder_channels: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssemblyConfig {
    pub backbone: BackboneSpec,
    pub image_size: usize,
    pub head: HeadConfig,
}

/// Tap layers at the same relative depths as 3, 5, 8, 12 of a 12-layer ViT,
/// or every layer for backbones of depth four or less.
pub fn default_taps(depth: usize) -> Vec<usize> {
    if depth <= 4 {
        return (1..=depth).collect();
    }
    let mut taps: Vec<usize> = [3usize, 5, 8, 12]
        .iter()
        .map(|&t| ((t * depth) as f64 / 12.0).round().max(1.0) as usize)
        .collect();
    taps.dedup();
    taps
}

impl AssemblyConfig {
    pub fn classifier(backbone: BackboneSpec, image_size: usize, num_classes: usize, pooled_by: PooledBy) -> Self {
        Self { backbone, image_size, head: HeadConfig::LinearCls { num_classes, pooled_by } }
    }

    pub fn change_detector(backbone: BackboneSpec, image_size: usize, fusion: Fusion, tap_layers: Vec<usize>) -> Self {
        Self {
            backbone,
            image_size,
            head: HeadConfig::PyramidMaskDecoder { fusion, tap_layers, neck_channels: 64, decoder_channels: 64 },
        }
    }

    pub fn task(&self) -> Task {
        match self.head {
            HeadConfig::LinearCls { .. } => Task::Classification,
            HeadConfig::PyramidMaskDecoder { .. } => Task::ChangeDetection,
        }
    }

    pub fn kind(&self) -> SampleKind {
        match self.task() {
            Task::Classification => SampleKind::Classification,
            Task::ChangeDetection => SampleKind::Bitemporal,
        }
    }

    pub fn fusion(&self) -> Option<Fusion> {
        match self.head {
            HeadConfig::PyramidMaskDecoder { fusion, .. } => Some(fusion),
            HeadConfig::LinearCls { .. } => None,
        }
    }

    /// Analytic cost of one forward pass (one image, or one pair), computed
    /// from the shapes alone.
    pub fn flops_components(&self, convention: FlopConvention) -> Result<Vec<Component>, FlopsError> {
        let side = self.image_size;
        let spec = &self.backbone;
        let parts = vit_forward_breakdown(spec, side, convention)?;
        let backbone: f64 = parts.iter().map(|(_, f)| f).sum::<f64>() / 1e9;
        let per_mac = convention.per_mac();
        let g = spec.grid_side(side)?;
        Ok(match &self.head {
            HeadConfig::LinearCls { num_classes, .. } => vec![
                Component::analytic("backbone", backbone),
                Component::analytic("head", linear_flops(1, spec.width, *num_classes, convention) / 1e9),
            ],
            HeadConfig::PyramidMaskDecoder { fusion, tap_layers, neck_channels, decoder_channels } => {
                let in_ch = match fusion {
                    Fusion::Subtract => spec.width,
                    Fusion::Concat => 2 * spec.width,
                };
                let n = tap_layers.len();
                let finest = side / level_stride(0);
                let neck = neck_macs(in_ch, *neck_channels, spec.patch_size, n, (g, g));
                let decoder = decoder_macs(*neck_channels, *decoder_channels, n, 2, (finest, finest));
                vec![
                    Component::analytic("backbone_a", backbone),
                    Component::analytic("backbone_b", backbone),
                    Component::analytic("neck", per_mac * neck / 1e9),
                    Component::analytic("decoder", per_mac * decoder / 1e9),
                ]
            }
        })
    }

    pub fn flops(&self, convention: FlopConvention) -> Result<FlopsReport, FlopsError> {
        gate(&self.flops_components(convention)?, self.task(), convention)
    }

    pub fn validate(&self) -> Result<(), AssemblyError> {
        self.backbone.validate()?;
        let g = self.backbone.grid_side(self.image_size)?;
        let bad = |m: String| Err(AssemblyError::Invalid(m));
        match &self.head {
            HeadConfig::LinearCls { num_classes, pooled_by } => {
                if *num_classes < 2 {
                    return bad(format!("need at least 2 classes, got {num_classes}"));
                }
                if *pooled_by == PooledBy::ClsToken && !self.backbone.uses_cls_token {
                    return bad("cls_token pooling requested on a backbone without a class token".into());
                }
            }
            HeadConfig::PyramidMaskDecoder { tap_layers, neck_channels, decoder_channels, .. } => {
                if tap_layers.is_empty() {
                    return bad("the pyramid decoder needs at least one tap layer".into());
                }
                if let Some(&t) = tap_layers.iter().find(|&&t| t == 0 || t > self.backbone.depth) {
                    return bad(format!("tap layer {t} outside 1..={}", self.backbone.depth));
                }
                if *neck_channels == 0 || *decoder_channels == 0 {
                    return bad("channel widths must be positive".into());
                }
                if !self.backbone.patch_size.is_power_of_two() {
                    return bad("the pyramid neck needs a power-of-two patch size".into());
                }
                let coarsest = crate::pyramid::level_stride(tap_layers.len() - 1);
                if coarsest > self.backbone.patch_size && g % (coarsest / self.backbone.patch_size) != 0 {
                    return bad(format!(
                        "grid side {g} cannot be pooled to stride {coarsest}; use an image side divisible by {coarsest}"
                    ));
                }
            }
        }
        Ok(())
    }

    fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone)]
enum Head {
    Linear { lin: Linear, pooled_by: PooledBy },
    Decoder { neck: Neck, decoder: PyramidDecoder, fusion: Fusion, taps: Vec<usize> },
}

/// A backbone wired to a task head, owning all of its parameters.
#[derive(Debug, Clone)]
pub struct ModelAssembly {
    pub config: AssemblyConfig,
    pub store: ParamStore,
    vit: VisionTransformer,
    head: Head,
}

/// Forward state of a classification pass.
#[derive(Debug, Clone)]
pub struct ClsForward {
    vit: VitOutput,
    pooled: Array2<f32>,
}

/// Forward state of a change-detection pass.
#[derive(Debug, Clone)]
pub struct CdForward {
    vit: VitOutput,
    pairs: usize,
    fused: Vec<Array4<f32>>,
    neck: NeckCache,
    decoder: DecoderCache,
}

impl CdForward {
    /// Fused per-tap feature maps entering the neck, in tap order.
    pub fn fused(&self) -> &[Array4<f32>] {
        &self.fused
    }
}

pub fn build_classifier(
    backbone: BackboneSpec,
    image_size: usize,
    num_classes: usize,
    pooled_by: PooledBy,
    seed: u64,
) -> Result<ModelAssembly, AssemblyError> {
    ModelAssembly::new(AssemblyConfig::classifier(backbone, image_size, num_classes, pooled_by), seed)
}

pub fn build_change_detector(
    backbone: BackboneSpec,
    image_size: usize,
    fusion: Fusion,
    tap_layers: Vec<usize>,
    seed: u64,
) -> Result<ModelAssembly, AssemblyError> {
    ModelAssembly::new(AssemblyConfig::change_detector(backbone, image_size, fusion, tap_layers), seed)
}

/// Stacks equally sized `H x W x 3` images into a batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Array3<f32>>) -> Result<Array4<f32>, AssemblyError> {
    let views: Vec<_> = images.into_iter().map(|a| a.view()).collect();
    if views.is_empty() {
        return Err(AssemblyError::Input("empty batch".into()));
    }
    ndarray::stack(Axis(0), &views).map_err(|_| AssemblyError::Input("images differ in size".into()))
}

impl ModelAssembly {
    /// Builds and initializes an assembly; the seed fixes every weight.
    pub fn new(config: AssemblyConfig, seed: u64) -> Result<Self, AssemblyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vit = VisionTransformer::new(&mut store, BACKBONE_PREFIX, &config.backbone, config.image_size, &mut rng);
        let d = config.backbone.width;
        let head = match &config.head {
            HeadConfig::LinearCls { num_classes, pooled_by } => Head::Linear {
                lin: Linear::new(&mut store, "head", d, *num_classes, &mut rng),
                pooled_by: *pooled_by,
            },
            HeadConfig::PyramidMaskDecoder { fusion, tap_layers, neck_channels, decoder_channels } => {
                let in_ch = match fusion {
                    Fusion::Subtract => d,
                    Fusion::Concat => 2 * d,
                };
                let n = tap_layers.len();
                let neck = Neck::new(&mut store, "neck", in_ch, *neck_channels, config.backbone.patch_size, n, &mut rng);
                let decoder = PyramidDecoder::new(&mut store, "decoder", *neck_channels, *decoder_channels, n, 2, &mut rng);
                Head::Decoder { neck, decoder, fusion: *fusion, taps: tap_layers.clone() }
            }
        };
        Ok(Self { config, store, vit, head })
    }

    pub fn backbone(&self) -> &VisionTransformer {
        &self.vit
    }

    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("backbone.")
    }

    /// Intermediate patch-token maps `(batch, gh, gw, width)` for `taps`.
    pub fn forward_with_taps(&self, images: &Array4<f32>, taps: &[usize]) -> BTreeMap<usize, Array4<f32>> {
        let out = self.vit.forward(&self.store, images, taps);
        taps.iter()
            .map(|&t| (t, out.tap_map(t).expect("requested tap recorded")))
            .collect()
    }

    // ---- classification ----

    pub fn forward_cls(&self, images: &Array4<f32>) -> (Array2<f32>, ClsForward) {
        let Head::Linear { lin, pooled_by } = &self.head else {
            panic!("forward_cls on a change-detection assembly");
        };
        let vit = self.vit.forward(&self.store, images, &[]);
        let pooled = match pooled_by {
            PooledBy::ClsToken => vit.cls(),
            PooledBy::GlobalAverage => vit.patch_mean(),
        };
        let logits = lin.forward(&self.store, pooled.view());
        (logits, ClsForward { vit, pooled })
    }

    /// Accumulates gradients of the head, and of the backbone when
    /// `train_backbone` is set.
    pub fn backward_cls(&mut self, fwd: &ClsForward, d_logits: &Array2<f32>, train_backbone: bool) {
        let Head::Linear { lin, pooled_by } = &self.head else {
            panic!("backward_cls on a change-detection assembly");
        };
        if !train_backbone {
            lin.backward_params(&mut self.store, fwd.pooled.view(), d_logits.view());
            return;
        }
        let d_pooled = lin.backward(&mut self.store, fwd.pooled.view(), d_logits.view());
        let v = &fwd.vit;
        let n = v.seq_len();
        let mut d_tokens = Array2::<f32>::zeros(v.tokens.raw_dim());
        match pooled_by {
            PooledBy::ClsToken => {
                for b in 0..v.batch {
                    d_tokens.row_mut(b * n).assign(&d_pooled.row(b));
                }
            }
            PooledBy::GlobalAverage => {
                let off = n - v.grid.0 * v.grid.1;
                let scale = 1.0 / (n - off) as f32;
                for b in 0..v.batch {
                    let g = &d_pooled.row(b) * scale;
                    for mut r in d_tokens.slice_mut(s![b * n + off..(b + 1) * n, ..]).rows_mut() {
                        r.assign(&g);
                    }
                }
            }
        }
        self.vit.backward(&mut self.store, v, Some(&d_tokens), &BTreeMap::new());
    }

    // ---- change detection ----

    fn fuse(fusion: Fusion, a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
        match fusion {
            Fusion::Subtract => a - b,
            Fusion::Concat => concat_channels(&[a.clone(), b.clone()]),
        }
    }

    /// Per-pixel two-class logits `(pairs, H, W, 2)` for image pairs.
    pub fn forward_cd(&self, a: &Array4<f32>, b: &Array4<f32>) -> (Array4<f32>, CdForward) {
        let Head::Decoder { neck, decoder, fusion, taps } = &self.head else {
            panic!("forward_cd on a classification assembly");
        };
        assert_eq!(a.dim(), b.dim(), "pair images must share a shape");
        let pairs = a.dim().0;
        let (_, h, w, _) = a.dim();
        let both = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("same shapes");
        let vit = self.vit.forward(&self.store, &both, taps);
        let fused: Vec<Array4<f32>> = taps
            .iter()
            .map(|&t| {
                let m = vit.tap_map(t).expect("tap recorded");
                let fa = m.slice(s![..pairs, .., .., ..]).to_owned();
                let fb = m.slice(s![pairs.., .., .., ..]).to_owned();
                Self::fuse(*fusion, &fa, &fb)
            })
            .collect();
        let (levels, neck_cache) = neck.forward(&self.store, &fused);
        let (logits, dec_cache) = decoder.forward(&self.store, &levels, h, w);
        (logits, CdForward { vit, pairs, fused, neck: neck_cache, decoder: dec_cache })
    }

    pub fn backward_cd(&mut self, fwd: &CdForward, d_logits: &Array4<f32>, train_backbone: bool) {
        let Head::Decoder { neck, decoder, .. } = &self.head else {
            panic!("backward_cd on a classification assembly");
        };
        let d_levels = decoder.backward(&mut self.store, &fwd.decoder, d_logits);
        let d_fused = neck.backward(&mut self.store, &fwd.neck, d_levels);
        if train_backbone {
            self.backward_fused(fwd, d_fused);
        }
    }

    /// Backbone gradients given gradients on the fused per-tap features.
    pub fn backward_fused(&mut self, fwd: &CdForward, d_fused: Vec<Array4<f32>>) {
        let Head::Decoder { fusion, taps, .. } = &self.head else {
            panic!("backward_fused on a classification assembly");
        };
        let d = self.config.backbone.width;
        let mut d_taps = BTreeMap::new();
        for (&t, df) in taps.iter().zip(d_fused) {
            let (da, db) = match fusion {
                Fusion::Subtract => (df.clone(), -df),
                Fusion::Concat => {
                    let mut parts = split_channels(&df, &[d, d]).into_iter();
                    (parts.next().expect("two parts"), parts.next().expect("two parts"))
                }
            };
            let both = ndarray::concatenate(Axis(0), &[da.view(), db.view()]).expect("same shapes");
            let both = both.as_standard_layout().to_owned();
            d_taps.insert(t, rows(&both).to_owned());
        }
        debug_assert_eq!(fwd.pairs * 2, fwd.vit.batch);
        self.vit.backward(&mut self.store, &fwd.vit, None, &d_taps);
    }

    /// Classifier weights of the mask decoder (used by tests and probes).
    pub fn decoder(&self) -> Option<&PyramidDecoder> {
        match &self.head {
            Head::Decoder { decoder, .. } => Some(decoder),
            Head::Linear { .. } => None,
        }
    }

    // ---- accounting ----

    pub fn flops_components(&self, convention: FlopConvention) -> Result<Vec<Component>, FlopsError> {
        self.config.flops_components(convention)
    }

    pub fn flops(&self, convention: FlopConvention) -> Result<FlopsReport, FlopsError> {
        self.config.flops(convention)
    }

    // ---- checkpoints ----

    pub fn save(&self, path: &Path) -> Result<(), AssemblyError> {
        let meta = HashMap::from([
            ("format".to_string(), FORMAT.to_string()),
            ("assembly_config".to_string(), self.config.to_json()),
        ]);
        Ok(checkpoint::save(&self.store, path, meta)?)
    }

    /// Rebuilds an assembly from the config stored in the checkpoint.
    pub fn load(path: &Path) -> Result<Self, AssemblyError> {
        let ck = checkpoint::load(path)?;
        let config = stored_config(&ck, path)?;
        let mut m = Self::new(config, 0)?;
        m.store.load_strict(&ck)?;
        Ok(m)
    }

    /// Loads a checkpoint that must have been written for `expected`.
    pub fn load_expecting(path: &Path, expected: &AssemblyConfig) -> Result<Self, AssemblyError> {
        let ck = checkpoint::load(path)?;
        let stored = stored_config(&ck, path)?;
        if &stored != expected {
            return Err(AssemblyError::ConfigMismatch { stored: stored.to_json(), expected: expected.to_json() });
        }
        let mut m = Self::new(stored, 0)?;
        m.store.load_strict(&ck)?;
        Ok(m)
    }

    /// Copies `backbone.*` tensors from any checkpoint (for example a
    /// pretraining run) and leaves the head at its initialization.
    pub fn load_backbone(&mut self, ck: &Checkpoint) -> Result<LoadReport, AssemblyError> {
        let report = self
            .store
            .load_from(ck, |n| Self::is_backbone_param(n).then(|| n.to_string()))?;
        if let Some(m) = report.missing.first() {
            return Err(AssemblyError::Checkpoint(CheckpointError::Missing(m.clone())));
        }
        Ok(report)
    }

    // ---- inference ----

    fn predict_batch(&self, samples: &[Sample]) -> Result<Vec<Prediction>, AssemblyError> {
        match self.config.kind() {
            SampleKind::Classification => {
                let imgs = samples
                    .iter()
                    .map(|s| match s {
                        Sample::Image(i) => Ok(&i.pixels),
                        Sample::Bitemporal(_) => Err(AssemblyError::Input("expected image samples".into())),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let (logits, _) = self.forward_cls(&stack_images(imgs)?);
                Ok(logits.rows().into_iter().map(|r| Prediction::Class(argmax(r.iter()))).collect())
            }
            SampleKind::Bitemporal => {
                let mut a = Vec::with_capacity(samples.len());
                let mut b = Vec::with_capacity(samples.len());
                for s in samples {
                    match s {
                        Sample::Bitemporal(p) => {
                            a.push(&p.pixels_a);
                            b.push(&p.pixels_b);
                        }
                        Sample::Image(_) => return Err(AssemblyError::Input("expected bitemporal samples".into())),
                    }
                }
                let (logits, _) = self.forward_cd(&stack_images(a)?, &stack_images(b)?);
                Ok(logits_to_masks(&logits).into_iter().map(Prediction::Mask).collect())
            }
        }
    }
}

fn stored_config(ck: &Checkpoint, path: &Path) -> Result<AssemblyConfig, AssemblyError> {
    let not = || AssemblyError::NotAnAssembly(path.display().to_string());
    if ck.metadata.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(not());
    }
    let raw = ck.metadata.get("assembly_config").ok_or_else(not)?;
    serde_json::from_str(raw).map_err(|_| not())
}

fn argmax<'a>(it: impl Iterator<Item = &'a f32>) -> usize {
    it.enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Per-pixel argmax of `(batch, H, W, 2)` logits.
pub fn logits_to_masks(logits: &Array4<f32>) -> Vec<Array2<u8>> {
    logits
        .outer_iter()
        .map(|img| img.map_axis(Axis(2), |px| u8::from(px[1] > px[0])))
        .collect()
}

/// Pixel rows of `(batch, H, W, C)` logits as a `(batch*H*W, C)` matrix.
pub fn logit_rows(logits: &Array4<f32>) -> Array2<f32> {
    rows(logits).to_owned()
}

/// Inverse of [`logit_rows`].
pub fn logit_map(d: Array2<f32>, b: usize, h: usize, w: usize) -> Array4<f32> {
    from_rows(d, b, h, w)
}

impl Predictor for ModelAssembly {
    fn kind(&self) -> SampleKind {
        self.config.kind()
    }

    fn flops_report(&self) -> Result<FlopsReport, FlopsError> {
        self.flops(FlopConvention::default())
    }

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>, PredictError> {
        Ok(self.predict_batch(samples)?)
    }
}
