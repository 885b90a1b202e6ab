//! Run manifests: one JSON document per training or evaluation run.
//!
//! Everything that depends only on the seed, the config and the data lives
//! under `results`; run ids, timestamps and wall-clock times live outside it,
//! so two runs with the same seed compare equal on `results`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::flops::FlopsReport;
use crate::metrics::{Evaluation, ScalePoint, Scorer};
use crate::sample::Sample;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("refusing to overwrite existing file {0}")]
    Exists(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> ManifestError {
    if source.kind() == std::io::ErrorKind::AlreadyExists {
        ManifestError::Exists(path.display().to_string())
    } else {
        ManifestError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub name: String,
    pub items: usize,
    /// SHA-256 over every pixel, label and mask in order.
    pub sha256: String,
}

impl DatasetFingerprint {
    pub fn of_samples(name: impl Into<String>, samples: &[Sample]) -> Self {
        let mut h = Sha256::new();
        for s in samples {
            match s {
                Sample::Image(img) => {
                    h.update(b"I");
                    for v in img.pixels.iter() {
                        h.update(v.to_le_bytes());
                    }
                    h.update((img.label as u64).to_le_bytes());
                }
                Sample::Bitemporal(bt) => {
                    h.update(b"B");
                    for v in bt.pixels_a.iter().chain(bt.pixels_b.iter()) {
                        h.update(v.to_le_bytes());
                    }
                    let mask: Vec<u8> = bt.change_mask.iter().copied().collect();
                    h.update(&mask);
                }
            }
        }
        Self {
            name: name.into(),
            items: samples.len(),
            sha256: hex::encode(h.finalize()),
        }
    }

    /// Fingerprint of unlabeled images, e.g. a pretraining tile set.
    pub fn of_images(name: impl Into<String>, images: &[ndarray::Array3<f32>]) -> Self {
        let mut h = Sha256::new();
        for img in images {
            h.update(b"U");
            for d in img.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in img.iter() {
                h.update(v.to_le_bytes());
            }
        }
        Self {
            name: name.into(),
            items: images.len(),
            sha256: hex::encode(h.finalize()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: rayon::current_num_threads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunResults {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<Scorer>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_scale: Vec<ScalePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flops: Option<FlopsReport>,
    /// Mean training loss per epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_loss: Vec<f64>,
}

impl RunResults {
    pub fn with_evaluation(mut self, e: &Evaluation) -> Self {
        self.metric = Some(e.scorer);
        self.per_scale = e.per_scale.clone();
        self.auc = Some(e.auc);
        self.flops = Some(e.flops.clone());
        self
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("results serialize");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetFingerprint>,
    pub results: RunResults,
    pub wall_clock_secs: f64,
    #[serde(default)]
    pub artifacts: Vec<String>,
    pub environment: Environment,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64, config: serde_json::Value) -> Self {
        Self {
            run_id: uuid::Uuid::new_v4().to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
            command: command.into(),
            seed,
            config,
            dataset: None,
            results: RunResults::default(),
            wall_clock_secs: 0.0,
            artifacts: Vec::new(),
            environment: Environment::current(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Writes the manifest to a file that must not exist yet.
    pub fn write_new(&self, path: &Path) -> Result<(), ManifestError> {
        write_new_file(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_new_file(path: &Path, bytes: &[u8]) -> Result<(), ManifestError> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}

/// `factor,score` rows, clean factor first.
pub fn per_scale_csv(points: &[ScalePoint]) -> Result<String, ManifestError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["factor", "score"])?;
    for p in points {
        w.write_record([p.factor.to_string(), p.score.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| ManifestError::Io {
        path: "<memory>".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
