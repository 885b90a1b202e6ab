use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use thiserror::Error;

use crate::param::ParamStore;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid checkpoint {path}: {message}")]
    Format { path: String, message: String },
    #[error("tensor {name}: expected shape {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint is missing tensor {0}")]
    Missing(String),
}

/// Tensors and string metadata read from a safetensors file.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, ArrayD<f32>>,
    pub metadata: HashMap<String, String>,
}

/// Outcome of loading a checkpoint into a store by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Store parameters with no matching checkpoint tensor.
    pub missing: Vec<String>,
    /// Checkpoint tensors the store did not ask for.
    pub unused: Vec<String>,
}

pub fn save(store: &ParamStore, path: &Path, metadata: HashMap<String, String>) -> Result<(), CheckpointError> {
    let fmt = |m: String| CheckpointError::Format { path: path.display().to_string(), message: m };
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .params()
        .iter()
        .map(|p| {
            let data = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            (p.name.clone(), p.value.shape().to_vec(), data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (n.clone(), v))
                .map_err(|e| fmt(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    safetensors::serialize_to_file(views, Some(metadata), path).map_err(|e| fmt(e.to_string()))
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let p = path.display().to_string();
    let raw = std::fs::read(path).map_err(|source| CheckpointError::Io { path: p.clone(), source })?;
    let fmt = |m: String| CheckpointError::Format { path: p.clone(), message: m };
    let (_, meta) = SafeTensors::read_metadata(&raw).map_err(|e| fmt(e.to_string()))?;
    let st = SafeTensors::deserialize(&raw).map_err(|e| fmt(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(fmt(format!("tensor {name} has dtype {:?}", view.dtype())));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), data).map_err(|e| fmt(e.to_string()))?;
        tensors.insert(name, arr);
    }
    Ok(Checkpoint { tensors, metadata: meta.metadata().clone().unwrap_or_default() })
}

impl ParamStore {
    /// Copies checkpoint tensors into parameters whose names `rename` maps
    /// to a checkpoint key. Shape mismatches are errors; absent keys are
    /// reported in `missing`.
    pub fn load_from(
        &mut self,
        ckpt: &Checkpoint,
        rename: impl Fn(&str) -> Option<String>,
    ) -> Result<LoadReport, CheckpointError> {
        let mut report = LoadReport::default();
        let mut used = std::collections::BTreeSet::new();
        for p in self.params_mut() {
            let Some(key) = rename(&p.name) else { continue };
            match ckpt.tensors.get(&key) {
                Some(t) if t.shape() == p.value.shape() => {
                    p.value.assign(t);
                    used.insert(key);
                    report.loaded.push(p.name.clone());
                }
                Some(t) => {
                    return Err(CheckpointError::ShapeMismatch {
                        name: p.name.clone(),
                        expected: p.value.shape().to_vec(),
                        found: t.shape().to_vec(),
                    })
                }
                None => report.missing.push(p.name.clone()),
            }
        }
        report.unused = ckpt.tensors.keys().filter(|k| !used.contains(*k)).cloned().collect();
        Ok(report)
    }

    /// Loads every parameter by exact name; any missing tensor is an error.
    pub fn load_strict(&mut self, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        let report = self.load_from(ckpt, |n| Some(n.to_string()))?;
        match report.missing.first() {
            Some(m) => Err(CheckpointError::Missing(m.clone())),
            None => Ok(()),
        }
    }
}
