//! Dataset adapters, the pretraining tiler and the synthetic change-detection
//! fixture.
//!
//! Two on-disk layouts are understood:
//!
//! ```text
//! classification root/                bitemporal root/
//!   <class>/<image files>               <split>/A/<stem>.png
//!   <split>.txt  (class/file lines)     <split>/B/<stem>.png
//!                                       <split>/label/<stem>.png
//! ```
//!
//! Class ids follow the sorted order of class directory names. Images are
//! decoded to floats in `[0, 1]`; label images are binarized at 0.5.

mod image_io;
pub mod synthetic;
mod tiling;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use image_io::{dimensions, read_mask, read_rgb, write_mask_png, write_rgb_png};
pub use tiling::{tile_for_pretraining, tile_spans, Tile};

use crate::sample::{BitemporalSample, ImageSample, Sample, SampleError, SampleKind};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error("split file {0} lists no items")]
    EmptySplit(PathBuf),
    #[error("split entry `{entry}` names unknown class `{class}`")]
    UnknownClass { entry: String, class: String },
    #[error("split entry `{0}` is not of the form class/file")]
    MalformedEntry(String),
    #[error("stem `{stem}` has no file in {missing}/")]
    UnmatchedStem { stem: String, missing: String },
    #[error("stem `{stem}`: {a}/ is {a_dims:?} but {b}/ is {b_dims:?}")]
    ShapeMismatch {
        stem: String,
        a: String,
        b: String,
        a_dims: (u32, u32),
        b_dims: (u32, u32),
    },
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Sample(#[from] SampleError),
}

impl DatasetError {
    pub(crate) fn unreadable(path: &Path, e: impl std::fmt::Display) -> Self {
        DatasetError::Unreadable {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub(crate) fn write(path: &Path, e: impl std::fmt::Display) -> Self {
        DatasetError::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (train, val, test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ItemTarget {
    Class { id: usize },
    Mask { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub images: Vec<PathBuf>,
    pub target: ItemTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: SampleKind,
    pub root: PathBuf,
    pub split: Split,
    pub items: Vec<ManifestItem>,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub resolution_note: String,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn sorted_dir_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| DatasetError::unreadable(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| DatasetError::unreadable(dir, e)))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort();
    Ok(out)
}

/// Reads `root/<split>.txt` (one `class/file` entry per line) against the
/// class directories of `root`.
pub fn load_classification_dir(root: &Path, split: Split) -> Result<DatasetManifest, DatasetError> {
    let class_names: Vec<String> = sorted_dir_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let ids: BTreeMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let split_file = root.join(format!("{}.txt", split.as_str()));
    let listing =
        fs::read_to_string(&split_file).map_err(|e| DatasetError::unreadable(&split_file, e))?;
    let mut items = Vec::new();
    for entry in listing.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (class, file) = entry
            .split_once('/')
            .ok_or_else(|| DatasetError::MalformedEntry(entry.to_string()))?;
        let id = *ids.get(class).ok_or_else(|| DatasetError::UnknownClass {
            entry: entry.to_string(),
            class: class.to_string(),
        })?;
        let path = root.join(class).join(file);
        dimensions(&path)?;
        items.push(ManifestItem {
            images: vec![path],
            target: ItemTarget::Class { id },
        });
    }
    if items.is_empty() {
        return Err(DatasetError::EmptySplit(split_file));
    }
    Ok(DatasetManifest {
        kind: SampleKind::Classification,
        root: root.to_path_buf(),
        split,
        items,
        class_names,
        resolution_note: String::new(),
    })
}

fn files_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DatasetError> {
    Ok(sorted_dir_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file())
        .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
        .collect())
}

/// Reads `root/<split>/{A,B,label}` triples matched by file stem.
pub fn load_bitemporal_dir(root: &Path, split: Split) -> Result<DatasetManifest, DatasetError> {
    let base = root.join(split.as_str());
    let dirs = ["A", "B", "label"];
    let listings = dirs
        .iter()
        .map(|d| files_by_stem(&base.join(d)))
        .collect::<Result<Vec<_>, _>>()?;
    let stems: BTreeSet<&String> = listings.iter().flat_map(|m| m.keys()).collect();
    let mut items = Vec::with_capacity(stems.len());
    for stem in stems {
        let mut paths = Vec::with_capacity(3);
        for (dir, listing) in dirs.iter().zip(&listings) {
            let p = listing.get(stem).ok_or_else(|| DatasetError::UnmatchedStem {
                stem: stem.clone(),
                missing: dir.to_string(),
            })?;
            paths.push(p.clone());
        }
        let dims = paths.iter().map(|p| dimensions(p)).collect::<Result<Vec<_>, _>>()?;
        for i in 1..3 {
            if dims[i] != dims[0] {
                return Err(DatasetError::ShapeMismatch {
                    stem: stem.clone(),
                    a: dirs[0].into(),
                    b: dirs[i].into(),
                    a_dims: dims[0],
                    b_dims: dims[i],
                });
            }
        }
        let label = paths.pop().expect("three paths");
        items.push(ManifestItem {
            images: paths,
            target: ItemTarget::Mask { path: label },
        });
    }
    if items.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(DatasetManifest {
        kind: SampleKind::Bitemporal,
        root: root.to_path_buf(),
        split,
        items,
        class_names: Vec::new(),
        resolution_note: String::new(),
    })
}

/// Decodes every item of a manifest, in manifest order.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>, DatasetError> {
    manifest
        .items
        .iter()
        .map(|item| match (&item.target, item.images.as_slice()) {
            (ItemTarget::Class { id }, [path]) => {
                Ok(Sample::Image(ImageSample::new(read_rgb(path)?, *id)?))
            }
            (ItemTarget::Mask { path }, [a, b]) => Ok(Sample::Bitemporal(BitemporalSample::new(
                read_rgb(a)?,
                read_rgb(b)?,
                read_mask(path)?,
            )?)),
            _ => Err(DatasetError::MalformedEntry(format!("{:?}", item.images))),
        })
        .collect()
}

/// Writes bitemporal samples in the `<split>/{A,B,label}` layout.
pub fn write_bitemporal_split(
    root: &Path,
    split: Split,
    samples: &[BitemporalSample],
) -> Result<(), DatasetError> {
    let base = root.join(split.as_str());
    for d in ["A", "B", "label"] {
        let dir = base.join(d);
        fs::create_dir_all(&dir).map_err(|e| DatasetError::write(&dir, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        write_rgb_png(&base.join("A").join(&name), &s.pixels_a)?;
        write_rgb_png(&base.join("B").join(&name), &s.pixels_b)?;
        write_mask_png(&base.join("label").join(&name), &s.change_mask)?;
    }
    Ok(())
}
