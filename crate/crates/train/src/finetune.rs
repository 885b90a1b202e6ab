//! Supervised fine-tuning for classification and change detection.

use std::sync::mpsc::sync_channel;
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use scalebench_core::distortion::{DistortionError, DistortionSpec};
use scalebench_core::flops::Task;
use scalebench_core::manifest::{DatasetFingerprint, RunManifest, RunResults};
use scalebench_core::metrics::{evaluate_model, EvalError, Scorer};
use scalebench_core::sample::Sample;
use scalebench_nn::loss::cross_entropy;
use scalebench_nn::{clip_grad_norm, AdamW, GroupConfig, Schedule};

use crate::assembly::{logit_map, logit_rows, stack_images, AssemblyError, ModelAssembly};
use crate::augment::apply_train_augmentation;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("the training set is empty")]
    EmptyDataset,
    #[error("model is built for {model:?} but the config says {config:?}")]
    TaskMismatch { model: Task, config: Task },
    #[error("sample {index} does not match the model's task")]
    SampleKind { index: usize },
    #[error(
        "non-finite training loss at epoch {epoch}, step {step} (batch {batch_id}, samples {samples:?}): \
         loss={loss}, lr={lr:e}, grad_norm={grad_norm}"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        batch_id: usize,
        samples: Vec<usize>,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },
    #[error(transparent)]
    Augment(#[from] DistortionError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Linear warmup over `warmup_steps` optimizer steps, then cosine decay to `min_lr`.
    WarmupCosine { warmup_steps: usize },
    /// Multiply by `gamma` at each milestone epoch.
    MultiStep { milestones: Vec<usize>, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_backbone: bool,
    pub scale_aug: bool,
    /// Draw augmentation factors from {2,4,8} only.
    #[serde(default)]
    pub strict_factors: bool,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub class_weights: Option<Vec<f32>>,
}

impl TrainConfig {
    /// Full fine-tuning for scene classification.
    pub fn classification() -> Self {
        Self {
            task: Task::Classification,
            epochs: 100,
            batch_size: 64,
            freeze_backbone: false,
            scale_aug: false,
            strict_factors: false,
            optimizer: OptimizerConfig { peak_lr: 1e-4, min_lr: 1e-5, weight_decay: 0.05 },
            schedule: LrSchedule::WarmupCosine { warmup_steps: 0 },
            seed: 0,
            grad_clip: None,
            class_weights: None,
        }
    }

    /// Linear probe: frozen backbone, step schedule.
    pub fn linear_probe() -> Self {
        Self {
            freeze_backbone: true,
            optimizer: OptimizerConfig { peak_lr: 1e-3, min_lr: 0.0, weight_decay: 0.0 },
            schedule: LrSchedule::MultiStep { milestones: vec![60, 80], gamma: 0.1 },
            ..Self::classification()
        }
    }

    pub fn change_detection() -> Self {
        Self {
            task: Task::ChangeDetection,
            epochs: 200,
            batch_size: 32,
            freeze_backbone: false,
            scale_aug: false,
            strict_factors: false,
            optimizer: OptimizerConfig { peak_lr: 6e-5, min_lr: 0.0, weight_decay: 0.05 },
            schedule: LrSchedule::WarmupCosine { warmup_steps: 10 },
            seed: 0,
            grad_clip: None,
            class_weights: None,
        }
    }

    /// The change-detection recipe shrunk to a CPU budget of a few minutes:
    /// 20 epochs of a 64-pixel fixture, so fewer and larger steps.
    pub fn desk_change_detection() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            optimizer: OptimizerConfig { peak_lr: 1e-3, min_lr: 1e-5, weight_decay: 0.05 },
            schedule: LrSchedule::WarmupCosine { warmup_steps: 60 },
            grad_clip: Some(1.0),
            ..Self::change_detection()
        }
    }

    pub fn validate(&self) -> Result<(), FinetuneError> {
        let bad = |m: &str| Err(FinetuneError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        let o = &self.optimizer;
        if !(o.min_lr >= 0.0 && o.peak_lr > o.min_lr) {
            return bad("need peak_lr > min_lr >= 0");
        }
        if o.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        if let LrSchedule::MultiStep { gamma, .. } = self.schedule {
            if !(gamma > 0.0 && gamma <= 1.0) {
                return bad("multistep gamma must lie in (0, 1]");
            }
        }
        if let Some(w) = &self.class_weights {
            let expected = if self.task == Task::ChangeDetection { Some(2) } else { None };
            if expected.is_some_and(|n| w.len() != n) || w.iter().any(|&v| !(v >= 0.0)) {
                return bad("class_weights must be non-negative, one per class");
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// The step-indexed learning-rate schedule for a dataset of `n` samples.
    pub fn lr_schedule(&self, n: usize) -> Schedule {
        let spe = self.steps_per_epoch(n);
        let o = &self.optimizer;
        match &self.schedule {
            LrSchedule::WarmupCosine { warmup_steps } => Schedule::WarmupCosine {
                base: o.peak_lr,
                last: o.min_lr,
                warmup: *warmup_steps,
                total: spe * self.epochs,
            },
            LrSchedule::MultiStep { milestones, gamma } => Schedule::MultiStep {
                base: o.peak_lr,
                milestones: milestones.iter().map(|m| m * spe).collect(),
                gamma: *gamma,
            },
        }
    }
}

/// One training batch after augmentation.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Global step index.
    pub id: usize,
    pub epoch: usize,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
    pub inputs: BatchInputs,
}

#[derive(Debug, Clone)]
pub enum BatchInputs {
    Classification { images: Array4<f32>, labels: Vec<usize> },
    Pairs { a: Array4<f32>, b: Array4<f32>, targets: Vec<usize> },
}

/// The exact sequence of batches a run sees: a fresh shuffle per epoch and
/// per-sample augmentation, both drawn from streams derived from the seed.
pub struct BatchStream<'a> {
    samples: &'a [Sample],
    config: &'a TrainConfig,
    order_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
    next_id: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(samples: &'a [Sample], config: &'a TrainConfig) -> Self {
        let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
        order_rng.set_stream(1);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
        aug_rng.set_stream(2);
        Self {
            samples,
            config,
            order_rng,
            aug_rng,
            epoch: 0,
            order: Vec::new(),
            cursor: usize::MAX,
            next_id: 0,
        }
    }

    fn assemble(&mut self, indices: Vec<usize>) -> Result<Batch, FinetuneError> {
        let mut aug = Vec::with_capacity(indices.len());
        for &i in &indices {
            aug.push(apply_train_augmentation(
                &self.samples[i],
                self.config.scale_aug,
                self.config.strict_factors,
                &mut self.aug_rng,
            )?);
        }
        let inputs = match &aug[0] {
            Sample::Image(_) => {
                let mut imgs = Vec::with_capacity(aug.len());
                let mut labels = Vec::with_capacity(aug.len());
                for (s, &i) in aug.iter().zip(&indices) {
                    let Sample::Image(s) = s else { return Err(FinetuneError::SampleKind { index: i }) };
                    imgs.push(&s.pixels);
                    labels.push(s.label);
                }
                BatchInputs::Classification { images: stack_images(imgs)?, labels }
            }
            Sample::Bitemporal(_) => {
                let (mut a, mut b, mut targets) = (Vec::new(), Vec::new(), Vec::new());
                for (s, &i) in aug.iter().zip(&indices) {
                    let Sample::Bitemporal(s) = s else { return Err(FinetuneError::SampleKind { index: i }) };
                    a.push(&s.pixels_a);
                    b.push(&s.pixels_b);
                    targets.extend(s.change_mask.iter().map(|&m| usize::from(m)));
                }
                BatchInputs::Pairs { a: stack_images(a)?, b: stack_images(b)?, targets }
            }
        };
        let id = self.next_id;
        self.next_id += 1;
        Ok(Batch { id, epoch: self.epoch - 1, indices, inputs })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch, FinetuneError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            if self.epoch == self.config.epochs {
                return None;
            }
            self.order = (0..self.samples.len()).collect();
            self.order.shuffle(&mut self.order_rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(self.assemble(indices))
    }
}

/// Loss and logit gradient of `model` on one batch (no parameter update).
pub fn batch_loss(
    model: &ModelAssembly,
    batch: &Batch,
    class_weights: Option<&[f32]>,
) -> (f32, BatchGrad) {
    match &batch.inputs {
        BatchInputs::Classification { images, labels } => {
            let (logits, fwd) = model.forward_cls(images);
            let (loss, grad) = cross_entropy(logits.view(), labels, class_weights);
            (loss, BatchGrad::Classification { fwd, grad })
        }
        BatchInputs::Pairs { a, b, targets } => {
            let (logits, fwd) = model.forward_cd(a, b);
            let (n, h, w, _) = logits.dim();
            let (loss, grad) = cross_entropy(logit_rows(&logits).view(), targets, class_weights);
            (loss, BatchGrad::Pairs { fwd, grad: logit_map(grad, n, h, w) })
        }
    }
}

/// What the backward pass of [`batch_loss`] needs.
pub enum BatchGrad {
    Classification { fwd: crate::assembly::ClsForward, grad: Array2<f32> },
    Pairs { fwd: crate::assembly::CdForward, grad: Array4<f32> },
}

impl BatchGrad {
    pub fn backward(&self, model: &mut ModelAssembly, train_backbone: bool) {
        match self {
            BatchGrad::Classification { fwd, grad } => model.backward_cls(fwd, grad, train_backbone),
            BatchGrad::Pairs { fwd, grad } => model.backward_cd(fwd, grad, train_backbone),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub first_batch_loss: f64,
    pub steps: usize,
    /// Number of parameter tensors the optimizer updated.
    pub trainable_tensors: usize,
    pub wall_clock_secs: f64,
}

fn check_inputs(model: &ModelAssembly, samples: &[Sample], config: &TrainConfig) -> Result<(), FinetuneError> {
    config.validate()?;
    let task = model.config.task();
    if task != config.task {
        return Err(FinetuneError::TaskMismatch { model: task, config: config.task });
    }
    if samples.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    let kind = model.config.kind();
    if let Some(index) = samples.iter().position(|s| s.kind() != kind) {
        return Err(FinetuneError::SampleKind { index });
    }
    Ok(())
}

/// An optimizer over the parameters `config` allows to train.
pub fn make_optimizer(model: &ModelAssembly, config: &TrainConfig) -> AdamW {
    let freeze = config.freeze_backbone;
    AdamW::new(
        &model.store,
        vec![GroupConfig { lr: config.optimizer.peak_lr, weight_decay: config.optimizer.weight_decay }],
        |name| (!(freeze && ModelAssembly::is_backbone_param(name))).then_some(0),
    )
}

pub fn finetune(model: &mut ModelAssembly, samples: &[Sample], config: &TrainConfig) -> Result<TrainReport, FinetuneError> {
    finetune_with(model, samples, config, |_| {})
}

/// Trains in place; `on_epoch` sees a report after every epoch. The model
/// left behind is the last-epoch model.
pub fn finetune_with(
    model: &mut ModelAssembly,
    samples: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainReport, FinetuneError> {
    check_inputs(model, samples, config)?;
    let start = Instant::now();
    let schedule = config.lr_schedule(samples.len());
    let spe = config.steps_per_epoch(samples.len());
    let mut opt = make_optimizer(model, config);
    let train_backbone = !config.freeze_backbone;
    let weights = config.class_weights.as_deref();

    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut first_batch_loss = f64::NAN;
    let mut running = 0.0f64;
    let mut epoch_start = Instant::now();

    std::thread::scope(|scope| -> Result<(), FinetuneError> {
        let (tx, rx) = sync_channel::<Result<Batch, FinetuneError>>(2);
        scope.spawn(move || {
            for b in BatchStream::new(samples, config) {
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        for batch in rx {
            let batch = batch?;
            let step = batch.id;
            let lr = schedule.at(step);
            opt.set_lr(0, lr);
            model.store.zero_grad();
            let (loss, grad) = batch_loss(model, &batch, weights);
            if step == 0 {
                first_batch_loss = loss as f64;
            }
            let non_finite = |loss: f64, grad_norm: f64| FinetuneError::NonFinite {
                epoch: batch.epoch,
                step,
                batch_id: batch.id,
                samples: batch.indices.clone(),
                loss,
                lr,
                grad_norm,
            };
            if !loss.is_finite() {
                return Err(non_finite(loss as f64, f64::NAN));
            }
            grad.backward(model, train_backbone);
            let grad_norm = match config.grad_clip {
                Some(c) => clip_grad_norm(&mut model.store, c),
                None => model.store.grad_norm(),
            };
            if !grad_norm.is_finite() {
                return Err(non_finite(loss as f64, grad_norm));
            }
            opt.step(&mut model.store);
            running += loss as f64;
            if (step + 1) % spe == 0 {
                let report = EpochReport {
                    epoch: batch.epoch,
                    mean_loss: running / spe as f64,
                    lr,
                    secs: epoch_start.elapsed().as_secs_f64(),
                };
                on_epoch(&report);
                epoch_loss.push(report.mean_loss);
                running = 0.0;
                epoch_start = Instant::now();
            }
        }
        Ok(())
    })?;

    Ok(TrainReport {
        epoch_loss,
        first_batch_loss,
        steps: spe * config.epochs,
        trainable_tensors: opt.trainable_count(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Fine-tunes, evaluates the last checkpoint under `spec` and returns the
/// run manifest (config, per-epoch loss, per-scale scores, AUC).
pub fn finetune_and_evaluate(
    model: &mut ModelAssembly,
    train: &[Sample],
    test: &[Sample],
    config: &TrainConfig,
    spec: &DistortionSpec,
) -> Result<(TrainReport, RunManifest), FinetuneError> {
    finetune_and_evaluate_with(model, train, test, config, spec, |_| {})
}

pub fn finetune_and_evaluate_with(
    model: &mut ModelAssembly,
    train: &[Sample],
    test: &[Sample],
    config: &TrainConfig,
    spec: &DistortionSpec,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<(TrainReport, RunManifest), FinetuneError> {
    let report = finetune_with(model, train, config, on_epoch)?;
    let eval = evaluate_model(&*model, test, spec, Scorer::for_kind(model.config.kind()), 32)?;
    let cfg = serde_json::json!({
        "train": config,
        "assembly": model.config,
        "distortion": spec,
    });
    let mut manifest = RunManifest::new("finetune", config.seed, cfg);
    manifest.dataset = Some(DatasetFingerprint::of_samples("test", test));
    manifest.results = RunResults { train_loss: report.epoch_loss.clone(), ..RunResults::default() }.with_evaluation(&eval);
    manifest.wall_clock_secs = report.wall_clock_secs;
    Ok((report, manifest))
}
