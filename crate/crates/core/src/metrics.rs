//! Task scores and the area-under-curve robustness metrics.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distortion::{distort_sample, DistortionError, DistortionSpec};
use crate::flops::{FlopsError, FlopsReport};
use crate::sample::{Sample, SampleKind};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("cannot score an empty prediction set")]
    Empty,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("mask {index}: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch {
        index: usize,
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("invalid robustness curve: {0}")]
    InvalidCurve(String),
}

/// Percentage of exact label matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Pixel confusion counts for the positive (changed) class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add_masks(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) {
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p != 0, g != 0) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
    }

    /// F1 in percent; a confusion with no positives anywhere scores 100.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            100.0
        } else {
            100.0 * (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Micro-averaged F1: counts pooled over every pixel of every image.
pub fn micro_f1(pred_masks: &[Array2<u8>], gt_masks: &[Array2<u8>]) -> Result<f64, MetricError> {
    if pred_masks.len() != gt_masks.len() {
        return Err(MetricError::LengthMismatch {
            predictions: pred_masks.len(),
            labels: gt_masks.len(),
        });
    }
    if gt_masks.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut conf = Confusion::default();
    for (index, (p, g)) in pred_masks.iter().zip(gt_masks).enumerate() {
        if p.dim() != g.dim() {
            return Err(MetricError::ShapeMismatch {
                index,
                pred: p.dim(),
                gt: g.dim(),
            });
        }
        conf.add_masks(p, g);
    }
    Ok(conf.f1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Inverse scale factor, `1/k`.
    pub x: f64,
    pub score: f64,
}

/// Score as a function of inverse scale factor, ordered by ascending `x`
/// and ending at `x = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    points: Vec<CurvePoint>,
}

impl RobustnessCurve {
    pub fn new(mut points: Vec<CurvePoint>) -> Result<Self, MetricError> {
        let bad = |m: String| Err(MetricError::InvalidCurve(m));
        if points.len() < 2 {
            return bad(format!("need at least two points, got {}", points.len()));
        }
        points.sort_by(|a, b| a.x.total_cmp(&b.x));
        for p in &points {
            if !(p.x > 0.0 && p.x <= 1.0) {
                return bad(format!("x = {} outside (0, 1]", p.x));
            }
            if !(p.score.is_finite() && (0.0..=100.0).contains(&p.score)) {
                return bad(format!("score {} outside [0, 100]", p.score));
            }
        }
        if points.windows(2).any(|w| w[0].x == w[1].x) {
            return bad("duplicate x values".into());
        }
        if points.last().map(|p| p.x) != Some(1.0) {
            return bad("curve must end at x = 1".into());
        }
        Ok(Self { points })
    }

    /// Builds the curve from `(factor k, score)` pairs with `x = 1/k`.
    pub fn from_factor_scores(pairs: &[(u32, f64)]) -> Result<Self, MetricError> {
        if let Some((k, _)) = pairs.iter().find(|(k, _)| *k == 0) {
            return Err(MetricError::InvalidCurve(format!("factor {k}")));
        }
        Self::new(
            pairs
                .iter()
                .map(|&(k, score)| CurvePoint {
                    x: 1.0 / k as f64,
                    score,
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    /// Scores ordered from the clean image (`x = 1`) to the most degraded.
    pub fn scores_clean_first(&self) -> Vec<f64> {
        self.points.iter().rev().map(|p| p.score).collect()
    }
}

/// Unnormalized trapezoid over the inverse-scale axis. Four default points
/// span `[1/8, 1]`, so a flat curve at `v` scores `0.875 * v`.
pub fn auc(curve: &RobustnessCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].x - w[0].x) * (w[0].score + w[1].score) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Accuracy,
    MicroF1,
}

impl Scorer {
    pub fn for_kind(kind: SampleKind) -> Self {
        match kind {
            SampleKind::Classification => Scorer::Accuracy,
            SampleKind::Bitemporal => Scorer::MicroF1,
        }
    }

    pub fn kind(self) -> SampleKind {
        match self {
            Scorer::Accuracy => SampleKind::Classification,
            Scorer::MicroF1 => SampleKind::Bitemporal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class(usize),
    Mask(Array2<u8>),
}

pub type PredictError = Box<dyn std::error::Error + Send + Sync>;

/// A model that can be run through the degradation protocol.
pub trait Predictor: Sync {
    fn kind(&self) -> SampleKind;

    /// Compute report for one forward pass; the protocol refuses models that
    /// fail their task budget.
    fn flops_report(&self) -> Result<FlopsReport, FlopsError>;

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>, PredictError>;
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("FLOPs gate failed: {total:.3} GFLOPs exceeds the {budget} GFLOPs budget")]
    GateFailed { total: f64, budget: f64 },
    #[error(transparent)]
    Flops(#[from] FlopsError),
    #[error("model handles {model:?} samples, scorer expects {scorer:?}")]
    ScorerMismatch { model: SampleKind, scorer: SampleKind },
    #[error("dataset contains a {found:?} sample, expected {expected:?}")]
    DatasetKind {
        expected: SampleKind,
        found: SampleKind,
    },
    #[error("empty evaluation set")]
    EmptyDataset,
    #[error(transparent)]
    Distortion(#[from] DistortionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("prediction failed: {0}")]
    Predict(PredictError),
    #[error("model returned {got} predictions for {expected} samples")]
    PredictionCount { expected: usize, got: usize },
    #[error("model returned a prediction of the wrong kind")]
    PredictionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub factor: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scorer: Scorer,
    pub per_scale: Vec<ScalePoint>,
    pub curve: RobustnessCurve,
    pub auc: f64,
    pub flops: FlopsReport,
}

/// Runs the degradation protocol: one score per factor, the curve over
/// `x = 1/k`, and its area. Factors are scored in parallel; samples are fed
/// to the model in chunks of `batch_size`.
pub fn evaluate_model<P: Predictor + ?Sized>(
    model: &P,
    samples: &[Sample],
    spec: &DistortionSpec,
    scorer: Scorer,
    batch_size: usize,
) -> Result<Evaluation, EvalError> {
    let flops = model.flops_report()?;
    if !flops.passed {
        return Err(EvalError::GateFailed {
            total: flops.total,
            budget: flops.budget,
        });
    }
    if model.kind() != scorer.kind() {
        return Err(EvalError::ScorerMismatch {
            model: model.kind(),
            scorer: scorer.kind(),
        });
    }
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if let Some(s) = samples.iter().find(|s| s.kind() != scorer.kind()) {
        return Err(EvalError::DatasetKind {
            expected: scorer.kind(),
            found: s.kind(),
        });
    }
    spec.validate()?;
    spec.check_kind(scorer.kind())?;

    let batch_size = batch_size.max(1);
    let per_scale = spec
        .factors
        .par_iter()
        .map(|&k| {
            let mut classes = (Vec::new(), Vec::new());
            let mut masks = (Vec::new(), Vec::new());
            for chunk in samples.chunks(batch_size) {
                let degraded = chunk
                    .iter()
                    .map(|s| distort_sample(s, k, spec.target, spec.kernel))
                    .collect::<Result<Vec<_>, _>>()?;
                let preds = model.predict(&degraded).map_err(EvalError::Predict)?;
                if preds.len() != degraded.len() {
                    return Err(EvalError::PredictionCount {
                        expected: degraded.len(),
                        got: preds.len(),
                    });
                }
                for (pred, sample) in preds.into_iter().zip(&degraded) {
                    match (pred, sample) {
                        (Prediction::Class(c), Sample::Image(s)) => {
                            classes.0.push(c);
                            classes.1.push(s.label);
                        }
                        (Prediction::Mask(m), Sample::Bitemporal(s)) => {
                            masks.0.push(m);
                            masks.1.push(s.change_mask.clone());
                        }
                        _ => return Err(EvalError::PredictionKind),
                    }
                }
            }
            let score = match scorer {
                Scorer::Accuracy => accuracy(&classes.0, &classes.1)?,
                Scorer::MicroF1 => micro_f1(&masks.0, &masks.1)?,
            };
            Ok(ScalePoint { factor: k, score })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let pairs: Vec<(u32, f64)> = per_scale.iter().map(|p| (p.factor, p.score)).collect();
    let curve = RobustnessCurve::from_factor_scores(&pairs)?;
    let auc = auc(&curve);
    Ok(Evaluation {
        scorer,
        per_scale,
        curve,
        auc,
        flops,
    })
}
