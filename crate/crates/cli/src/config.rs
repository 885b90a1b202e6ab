//! TOML run configs. Unknown keys are errors everywhere.
//!
//! A table may name a `preset`; its remaining keys then override the preset
//! field by field. Presets resolve innermost first, so
//! `[pretrain.backbone] preset = "tiny"` composes with `[pretrain] preset = "desk"`.
//! An override that carries its own `kind` tag replaces the tagged table
//! instead of merging into it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ndarray::Array3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use scalebench_core::dataset::synthetic::{make_synthetic_cd_fixture, make_synthetic_cls_fixture, make_synthetic_scenes};
use scalebench_core::dataset::{
    load_bitemporal_dir, load_classification_dir, load_samples, read_rgb, tile_for_pretraining, Split,
};
use scalebench_core::distortion::{DistortionSpec, DistortionTarget, DEFAULT_FACTORS};
use scalebench_core::flops::BackboneSpec;
use scalebench_core::resample::ResampleKernel;
use scalebench_core::sample::{Sample, SampleKind};
use scalebench_train::assembly::AssemblyConfig;
use scalebench_train::crops::CropConfig;
use scalebench_train::finetune::TrainConfig;
use scalebench_train::pretrain::PretrainConfig;

use crate::CliError;

type Table = toml::Table;

fn backbone_preset(name: &str) -> Option<BackboneSpec> {
    match name {
        "tiny" => Some(BackboneSpec::tiny()),
        "vit_b16" => Some(BackboneSpec::vit_b16()),
        _ => None,
    }
}

fn train_preset(name: &str) -> Option<TrainConfig> {
    match name {
        "classification" => Some(TrainConfig::classification()),
        "linear_probe" => Some(TrainConfig::linear_probe()),
        "change_detection" => Some(TrainConfig::change_detection()),
        "desk_change_detection" => Some(TrainConfig::desk_change_detection()),
        _ => None,
    }
}

fn pretrain_preset(name: &str) -> Option<PretrainConfig> {
    match name {
        "default" => Some(PretrainConfig::default()),
        "desk" => Some(PretrainConfig::desk()),
        _ => None,
    }
}

fn crops_preset(name: &str) -> Option<CropConfig> {
    match name {
        "default" => Some(CropConfig::default()),
        "desk" => Some(CropConfig::desk()),
        _ => None,
    }
}

/// Overlays `top` onto `base` key by key.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) if !t.contains_key("kind") => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn expand<T: Serialize>(table: &mut Table, path: &str, lookup: impl Fn(&str) -> Option<T>) -> Result<(), CliError> {
    let Some(name) = table.remove("preset") else { return Ok(()) };
    let name = name
        .as_str()
        .ok_or_else(|| CliError::Config(format!("{path}.preset must be a string")))?
        .to_string();
    let preset = lookup(&name).ok_or_else(|| CliError::Config(format!("unknown preset `{name}` for [{path}]")))?;
    let mut base = toml::Table::try_from(&preset).map_err(|e| CliError::Config(format!("preset `{name}`: {e}")))?;
    merge(&mut base, std::mem::take(table));
    *table = base;
    Ok(())
}

fn sub_table<'a>(doc: &'a mut Table, path: &[&str]) -> Option<&'a mut Table> {
    let mut t = doc;
    for key in path {
        t = t.get_mut(*key)?.as_table_mut()?;
    }
    Some(t)
}

fn expand_presets(doc: &mut Table) -> Result<(), CliError> {
    for path in [&["model", "backbone"][..], &["pretrain", "backbone"], &["pretrain", "crops"]] {
        if let Some(t) = sub_table(doc, path) {
            let name = path.join(".");
            if path[1] == "backbone" {
                expand(t, &name, backbone_preset)?;
            } else {
                expand(t, &name, crops_preset)?;
            }
        }
    }
    if let Some(t) = sub_table(doc, &["train"]) {
        expand(t, "train", train_preset)?;
    }
    if let Some(t) = sub_table(doc, &["pretrain"]) {
        expand(t, "pretrain", pretrain_preset)?;
    }
    Ok(())
}

pub fn parse<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, CliError> {
    let mut doc: Table = text.parse().map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    expand_presets(&mut doc)?;
    T::deserialize(doc).map_err(|e| CliError::Config(format!("{origin}: {e}")))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}

fn train_split() -> Split {
    Split::Train
}

fn test_split() -> Split {
    Split::Test
}

/// Where labeled samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    SyntheticChange { train_pairs: usize, test_pairs: usize, side: usize, train_seed: u64, test_seed: u64 },
    SyntheticScenes {
        train_images: usize,
        test_images: usize,
        side: usize,
        classes: usize,
        train_seed: u64,
        test_seed: u64,
    },
    /// `<root>/<split>/{A,B,label}` pairs.
    ChangeDir {
        root: PathBuf,
        #[serde(default = "train_split")]
        train_split: Split,
        #[serde(default = "test_split")]
        test_split: Split,
    },
    /// Class directories with `<split>.txt` listings.
    SceneDir {
        root: PathBuf,
        #[serde(default = "train_split")]
        train_split: Split,
        #[serde(default = "test_split")]
        test_split: Split,
    },
}

impl DataConfig {
    pub fn kind(&self) -> SampleKind {
        match self {
            DataConfig::SyntheticChange { .. } | DataConfig::ChangeDir { .. } => SampleKind::Bitemporal,
            DataConfig::SyntheticScenes { .. } | DataConfig::SceneDir { .. } => SampleKind::Classification,
        }
    }

    fn load(&self, train: bool) -> anyhow::Result<Vec<Sample>> {
        fn pick<T>(train: bool, a: T, b: T) -> T {
            if train {
                a
            } else {
                b
            }
        }
        Ok(match self {
            DataConfig::SyntheticChange { train_pairs, test_pairs, side, train_seed, test_seed } => {
                make_synthetic_cd_fixture(pick(train, *train_pairs, *test_pairs), *side, pick(train, *train_seed, *test_seed))?
                    .into_iter()
                    .map(Sample::Bitemporal)
                    .collect()
            }
            DataConfig::SyntheticScenes { train_images, test_images, side, classes, train_seed, test_seed } => {
                make_synthetic_cls_fixture(
                    pick(train, *train_images, *test_images),
                    *side,
                    *classes,
                    pick(train, *train_seed, *test_seed),
                )?
                .into_iter()
                .map(Sample::Image)
                .collect()
            }
            DataConfig::ChangeDir { root, train_split, test_split } => {
                load_samples(&load_bitemporal_dir(root, pick(train, *train_split, *test_split))?)?
            }
            DataConfig::SceneDir { root, train_split, test_split } => {
                load_samples(&load_classification_dir(root, pick(train, *train_split, *test_split))?)?
            }
        })
    }

    pub fn train(&self) -> anyhow::Result<Vec<Sample>> {
        self.load(true).context("loading the training split")
    }

    pub fn test(&self) -> anyhow::Result<Vec<Sample>> {
        self.load(false).context("loading the test split")
    }
}

fn default_factors() -> Vec<u32> {
    DEFAULT_FACTORS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_factors")]
    pub factors: Vec<u32>,
    #[serde(default)]
    pub kernel: ResampleKernel,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { factors: default_factors(), kernel: ResampleKernel::default() }
    }
}

impl EvalConfig {
    pub fn spec(&self, kind: SampleKind) -> Result<DistortionSpec, CliError> {
        let spec = DistortionSpec::new(self.factors.clone(), DistortionTarget::for_kind(kind))
            .map_err(|e| CliError::Config(e.to_string()))?
            .with_kernel(self.kernel);
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneFile {
    /// Pretraining checkpoint whose backbone initializes the model.
    #[serde(default)]
    pub init_backbone: Option<PathBuf>,
    pub data: DataConfig,
    pub model: AssemblyConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateFile {
    /// Model checkpoint; not needed with `--oracle`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl EvaluateFile {
    pub fn synthetic_default() -> Self {
        Self {
            checkpoint: None,
            data: DataConfig::SyntheticChange { train_pairs: 0, test_pairs: 16, side: 64, train_seed: 0, test_seed: 1 },
            eval: EvalConfig::default(),
        }
    }
}

/// Unlabeled images for pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum PretrainData {
    SyntheticScenes { images: usize, side: usize, seed: u64 },
    /// Every image file under `root`, cut into tiles of at most `max_side`.
    ImageDir { root: PathBuf, max_side: usize },
}

fn image_files(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            image_files(&p, out)?;
        } else if p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "tif" | "tiff"))
        {
            out.push(p);
        }
    }
    Ok(())
}

impl PretrainData {
    pub fn load(&self) -> anyhow::Result<Vec<Array3<f32>>> {
        match self {
            PretrainData::SyntheticScenes { images, side, seed } => Ok(make_synthetic_scenes(*images, *side, *seed)?),
            PretrainData::ImageDir { root, max_side } => {
                if *max_side == 0 {
                    bail!("max_side must be positive");
                }
                let mut files = Vec::new();
                image_files(root, &mut files)?;
                let mut tiles = Vec::new();
                for f in files {
                    let img = read_rgb(&f)?;
                    tiles.extend(tile_for_pretraining(&img, *max_side).into_iter().map(|t| t.pixels));
                }
                if tiles.is_empty() {
                    bail!("no images found under {}", root.display());
                }
                Ok(tiles)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainFile {
    pub data: PretrainData,
    pub pretrain: PretrainConfig,
}
