use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;

use scalebench_core::dataset::synthetic::{make_synthetic_cd_fixture, make_synthetic_cls_fixture};
use scalebench_core::dataset::{write_bitemporal_split, write_rgb_png, Split};
use scalebench_core::flops::{gate, Component, FlopConvention, FlopsError, FlopsReport, Task};
use scalebench_core::manifest::{per_scale_csv, write_new_file, DatasetFingerprint, RunManifest, RunResults};
use scalebench_core::metrics::{evaluate_model, PredictError, Prediction, Predictor, Scorer};
use scalebench_core::sample::{Sample, SampleKind};
use scalebench_nn::checkpoint;
use scalebench_train::assembly::{default_taps, AssemblyConfig, Fusion, HeadConfig, ModelAssembly, PooledBy};
use scalebench_train::finetune::finetune_and_evaluate_with;
use scalebench_train::pretrain::pretrain;

use crate::config::{self, EvaluateFile, FinetuneFile, PretrainFile};
use crate::plot::{curve_svg, Series};
use crate::report::{self, Row};
use crate::{BackboneArg, CliError, EvaluateArgs, FinetuneArgs, FlopsArgs, PretrainArgs, ReportArgs, SynthArgs, SynthKind};

/// A fresh `<out>/<command>-<run id>` directory; never reuses an old one.
fn create_run_dir(out: &Path, command: &str, run_id: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let dir = out.join(format!("{command}-{run_id}"));
    fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], artifacts: &mut Vec<String>) -> anyhow::Result<()> {
    write_new_file(&dir.join(name), bytes)?;
    artifacts.push(name.to_string());
    Ok(())
}

fn scorer_label(r: &RunResults) -> &'static str {
    match r.metric {
        Some(Scorer::Accuracy) => "accuracy",
        Some(Scorer::MicroF1) => "micro-F1",
        None => "score",
    }
}

/// Per-scale CSV and curve plot of evaluated results.
fn write_curve(dir: &Path, title: &str, r: &RunResults, artifacts: &mut Vec<String>) -> anyhow::Result<()> {
    write_file(dir, "per_scale.csv", per_scale_csv(&r.per_scale)?.as_bytes(), artifacts)?;
    let label = r.auc.map_or_else(|| "run".into(), |a| format!("AUC {a:.2}"));
    let series = [Series { label, points: &r.per_scale }];
    write_file(dir, "curve.svg", curve_svg(title, scorer_label(r), &series).as_bytes(), artifacts)
}

fn print_results(r: &RunResults) {
    for p in &r.per_scale {
        println!("1:{:<3} {:>8.3}", p.factor, p.score);
    }
    if let Some(a) = r.auc {
        println!("AUC   {a:>8.3}");
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn set_fusion(model: &mut AssemblyConfig, fusion: Fusion) -> Result<(), CliError> {
    match &mut model.head {
        HeadConfig::PyramidMaskDecoder { fusion: f, .. } => {
            *f = fusion;
            Ok(())
        }
        HeadConfig::LinearCls { .. } => Err(CliError::Config("--fusion only applies to change-detection models".into())),
    }
}

fn gate_checked(report: FlopsReport) -> Result<FlopsReport, CliError> {
    if report.passed {
        Ok(report)
    } else {
        Err(CliError::Gate(format!(
            "{} forward pass costs {:.3} GFLOPs, over the {} GFLOPs budget",
            report.task, report.total, report.budget
        )))
    }
}

pub fn finetune(args: &FinetuneArgs) -> Result<(), CliError> {
    let mut file: FinetuneFile = config::read(&args.config)?;
    if let Some(seed) = args.common.seed {
        file.train.seed = seed;
    }
    file.train.freeze_backbone |= args.freeze;
    file.train.scale_aug |= args.scale_aug;
    if let Some(f) = args.fusion {
        set_fusion(&mut file.model, f.into())?;
    }
    if let Some(f) = &args.factors {
        file.eval.factors = f.0.clone();
    }

    file.model.validate()?;
    file.train.validate()?;
    if file.model.task() != file.train.task {
        return Err(CliError::Config(format!(
            "model is a {} model but [train] says {}",
            file.model.task(),
            file.train.task
        )));
    }
    let kind = file.model.kind();
    if file.data.kind() != kind {
        return Err(CliError::Config("[data] does not match the model's task".into()));
    }
    let spec = file.eval.spec(kind)?;
    let flops = gate_checked(file.model.flops(FlopConvention::default())?)?;
    eprintln!("forward cost {:.4} GFLOPs of {} allowed", flops.total, flops.budget);

    let train = file.data.train()?;
    let test = file.data.test()?;
    eprintln!("{} training and {} test samples", train.len(), test.len());
    let mut model = ModelAssembly::new(file.model.clone(), file.train.seed)?;
    if let Some(path) = &file.init_backbone {
        let ck = checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
        let loaded = model.load_backbone(&ck)?;
        eprintln!("initialized {} backbone tensors from {}", loaded.loaded.len(), path.display());
    }

    let mut epoch_csv = String::from("epoch,mean_loss,lr,secs\n");
    let (_, mut manifest) = finetune_and_evaluate_with(&mut model, &train, &test, &file.train, &spec, |e| {
        eprintln!("epoch {:>4}  loss {:.5}  lr {:.3e}  {:.1}s", e.epoch + 1, e.mean_loss, e.lr, e.secs);
        epoch_csv += &format!("{},{},{},{}\n", e.epoch, e.mean_loss, e.lr, e.secs);
    })?;
    manifest.config = to_json(&file);

    let dir = create_run_dir(&args.common.out, "finetune", &manifest.run_id)?;
    let mut artifacts = Vec::new();
    model.save(&dir.join("model.safetensors"))?;
    artifacts.push("model.safetensors".into());
    write_file(&dir, "epochs.csv", epoch_csv.as_bytes(), &mut artifacts)?;
    write_curve(&dir, "fine-tuned model", &manifest.results, &mut artifacts)?;
    manifest.artifacts = artifacts;
    manifest.write_new(&dir.join("manifest.json"))?;
    print_results(&manifest.results);
    println!("run {}", dir.display());
    Ok(())
}

/// Answers with the ground truth of whatever it is shown.
struct Oracle {
    kind: SampleKind,
}

impl Predictor for Oracle {
    fn kind(&self) -> SampleKind {
        self.kind
    }

    fn flops_report(&self) -> Result<FlopsReport, FlopsError> {
        let task = match self.kind {
            SampleKind::Classification => Task::Classification,
            SampleKind::Bitemporal => Task::ChangeDetection,
        };
        gate(&[Component::analytic("oracle", 0.0)], task, FlopConvention::default())
    }

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>, PredictError> {
        Ok(samples
            .iter()
            .map(|s| match s {
                Sample::Image(s) => Prediction::Class(s.label),
                Sample::Bitemporal(s) => Prediction::Mask(s.change_mask.clone()),
            })
            .collect())
    }
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let mut file = match &args.config {
        Some(p) => config::read::<EvaluateFile>(p)?,
        None => EvaluateFile::synthetic_default(),
    };
    if let Some(c) = &args.checkpoint {
        file.checkpoint = Some(c.clone());
    }
    if let Some(f) = &args.factors {
        file.eval.factors = f.0.clone();
    }
    let kind = file.data.kind();
    let spec = file.eval.spec(kind)?;
    let scorer = Scorer::for_kind(kind);

    let (eval, title, test) = if args.oracle {
        let test = file.data.test()?;
        (evaluate_model(&Oracle { kind }, &test, &spec, scorer, 32)?, "oracle".to_string(), test)
    } else {
        let path = file
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::Config("no model: set `checkpoint`, pass --checkpoint, or use --oracle".into()))?;
        let model = ModelAssembly::load(&path)?;
        if model.config.kind() != kind {
            return Err(CliError::Config(format!("{} does not match the [data] task", path.display())));
        }
        let test = file.data.test()?;
        let name = path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
        (evaluate_model(&model, &test, &spec, scorer, 32)?, name, test)
    };

    let mut manifest = RunManifest::new(
        "evaluate",
        args.common.seed.unwrap_or(0),
        json!({ "evaluate": to_json(&file), "oracle": args.oracle }),
    );
    manifest.dataset = Some(DatasetFingerprint::of_samples("test", &test));
    manifest.results = RunResults::default().with_evaluation(&eval);
    let dir = create_run_dir(&args.common.out, "evaluate", &manifest.run_id)?;
    let mut artifacts = Vec::new();
    write_curve(&dir, &title, &manifest.results, &mut artifacts)?;
    manifest.artifacts = artifacts;
    manifest.write_new(&dir.join("manifest.json"))?;
    print_results(&manifest.results);
    println!("run {}", dir.display());
    Ok(())
}

pub fn pretrain_cmd(args: &PretrainArgs) -> Result<(), CliError> {
    let mut file: PretrainFile = config::read(&args.config)?;
    if let Some(seed) = args.common.seed {
        file.pretrain.seed = seed;
    }
    file.pretrain.scale_aug |= args.scale_aug;
    if let Some(s) = args.max_steps {
        file.pretrain.max_steps = Some(s);
    }
    file.pretrain.validate()?;
    let images = file.data.load()?;
    eprintln!("{} pretraining images", images.len());

    let start = std::time::Instant::now();
    let mut manifest = RunManifest::new("pretrain", file.pretrain.seed, to_json(&file));
    manifest.dataset = Some(DatasetFingerprint::of_images("pretrain", &images));
    let dir = create_run_dir(&args.common.out, "pretrain", &manifest.run_id)?;
    let outcome = pretrain(&images, file.pretrain.clone(), Some(&dir), |s| {
        if s.step % 10 == 0 {
            eprintln!(
                "step {:>6}  loss {:.5}  overlap {:.5}  distill {:.5}  lr {:.3e}",
                s.step, s.total_loss, s.overlap_loss, s.distill_loss, s.lr_backbone
            );
        }
    })?;

    let spe = outcome.state.steps_per_epoch().max(1);
    manifest.results.train_loss = outcome
        .log
        .chunks(spe)
        .map(|c| c.iter().map(|s| s.total_loss).sum::<f64>() / c.len() as f64)
        .collect();
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    let mut artifacts = vec!["pretrain_log.csv".to_string()];
    artifacts.extend(
        outcome
            .checkpoints
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())),
    );
    manifest.artifacts = artifacts;
    manifest.write_new(&dir.join("manifest.json"))?;

    let tail = &outcome.log[outcome.log.len().saturating_sub(20)..];
    if !tail.is_empty() {
        let mean = tail.iter().map(|s| s.overlap_loss).sum::<f64>() / tail.len() as f64;
        println!("steps {}  overlap loss over the last {} steps {:.5}", outcome.log.len(), tail.len(), mean);
    }
    if let Some(teacher) = outcome.checkpoints.iter().rev().find(|p| p.to_string_lossy().contains("teacher")) {
        println!("teacher {}", teacher.display());
    }
    println!("run {}", dir.display());
    Ok(())
}

pub fn flops(args: &FlopsArgs) -> Result<(), CliError> {
    let mut model = match &args.config {
        Some(p) => {
            #[derive(serde::Deserialize)]
            struct ModelOnly {
                model: AssemblyConfig,
            }
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            // other sections of a run config are validated by their own command
            let mut doc: toml::Table =
                text.parse().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            doc.retain(|k, _| k == "model");
            config::parse::<ModelOnly>(&doc.to_string(), &p.display().to_string())?.model
        }
        None => {
            let backbone = match args.backbone {
                BackboneArg::Tiny => scalebench_core::flops::BackboneSpec::tiny(),
                BackboneArg::VitB16 => scalebench_core::flops::BackboneSpec::vit_b16(),
            };
            match args.task {
                crate::TaskArg::Classification => {
                    AssemblyConfig::classifier(backbone, args.image_size, args.classes, PooledBy::ClsToken)
                }
                crate::TaskArg::ChangeDetection => {
                    let taps = default_taps(backbone.depth);
                    AssemblyConfig::change_detector(backbone, args.image_size, Fusion::Subtract, taps)
                }
            }
        }
    };
    if let Some(f) = args.fusion {
        set_fusion(&mut model, f.into())?;
    }
    model.validate()?;
    let report = model.flops(args.convention.into())?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_table());
    }
    gate_checked(report).map(|_| ())
}

fn row_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "manifest" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

pub fn report_cmd(args: &ReportArgs) -> Result<(), CliError> {
    let rows = args
        .manifests
        .iter()
        .map(|p| {
            let manifest = RunManifest::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Row { label: row_label(p), manifest })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let table = match args.format {
        crate::ReportFormat::Markdown => report::markdown(&rows),
        crate::ReportFormat::Csv => report::csv(&rows)?,
    };
    print!("{table}");
    if let Some(out) = &args.out {
        write_new_file(out, table.as_bytes()).map_err(anyhow::Error::from)?;
    }
    if let Some(plot) = &args.plot {
        let series: Vec<Series> = rows
            .iter()
            .map(|r| Series { label: r.label.chars().take(16).collect(), points: &r.manifest.results.per_scale })
            .collect();
        write_new_file(plot, curve_svg("score vs. scale", "score", &series).as_bytes()).map_err(anyhow::Error::from)?;
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let split: Split = args.split;
    let mut manifest = RunManifest::new("synth", args.seed, to_json(&json!({
        "kind": format!("{:?}", args.kind).to_lowercase(),
        "count": args.count,
        "side": args.side,
        "classes": args.classes,
        "split": split,
    })));
    let samples: Vec<Sample> = match args.kind {
        SynthKind::Change => {
            if args.out.join(split.as_str()).exists() {
                return Err(CliError::Config(format!(
                    "{} already holds a `{}` split",
                    args.out.display(),
                    split.as_str()
                )));
            }
            let pairs = make_synthetic_cd_fixture(args.count, args.side, args.seed).map_err(anyhow::Error::from)?;
            write_bitemporal_split(&args.out, split, &pairs).map_err(anyhow::Error::from)?;
            pairs.into_iter().map(Sample::Bitemporal).collect()
        }
        SynthKind::Scenes => {
            let listing = args.out.join(format!("{}.txt", split.as_str()));
            if listing.exists() {
                return Err(CliError::Config(format!("{} already exists", listing.display())));
            }
            let images = make_synthetic_cls_fixture(args.count, args.side, args.classes, args.seed)
                .map_err(anyhow::Error::from)?;
            let mut lines = String::new();
            for (i, s) in images.iter().enumerate() {
                let class = format!("class_{:02}", s.label);
                let file = format!("{}_{i:05}.png", split.as_str());
                let dir = args.out.join(&class);
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                write_rgb_png(&dir.join(&file), &s.pixels).map_err(anyhow::Error::from)?;
                lines += &format!("{class}/{file}\n");
            }
            let mut f = fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&listing)
                .with_context(|| format!("creating {}", listing.display()))?;
            f.write_all(lines.as_bytes()).context("writing the split listing")?;
            images.into_iter().map(Sample::Image).collect()
        }
    };
    manifest.dataset = Some(DatasetFingerprint::of_samples(split.as_str(), &samples));
    manifest.artifacts = vec![split.as_str().to_string()];
    let path = args.out.join(format!("synth-{}-{}.json", split.as_str(), manifest.run_id));
    manifest.write_new(&path)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}
