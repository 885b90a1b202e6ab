use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scalebench_core::manifest::RunManifest;

fn scalebench(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalebench")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dirs(out: &Path, command: &str) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .map(|r| r.map(|e| e.unwrap().path()).collect())
        .unwrap_or_default();
    dirs.retain(|p| p.file_name().unwrap().to_string_lossy().starts_with(&format!("{command}-")));
    dirs.sort_by_key(|p| fs::metadata(p).unwrap().modified().unwrap());
    dirs
}

const SMALL_CD: &str = r#"
[data]
source = "synthetic_change"
train_pairs = 8
test_pairs = 4
side = 32
train_seed = 0
test_seed = 1

[model]
image_size = 32
[model.backbone]
preset = "tiny"
depth = 2
width = 16
heads = 2
[model.head]
kind = "pyramid_mask_decoder"
fusion = "subtract"
tap_layers = [1, 2]
neck_channels = 8
decoder_channels = 8

[train]
preset = "desk_change_detection"
epochs = 1
batch_size = 4
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn flops_gate_report_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = scalebench(&["flops", "--backbone", "vit-b16", "--image-size", "256", "--task", "classification"], tmp.path());
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(stdout(&ok).contains("passed: true"));

    let json = scalebench(&["flops", "--image-size", "224", "--json"], tmp.path());
    let report: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    let total = report["total"].as_f64().unwrap();
    assert!((total - 17.6).abs() / 17.6 < 0.1, "{total}");

    let big = scalebench(&["flops", "--image-size", "1024"], tmp.path());
    assert_eq!(code(&big), 2);
    assert!(stdout(&big).contains("passed: false"));
    assert!(stderr(&big).contains("budget"));
}

#[test]
fn oracle_evaluation_writes_a_flat_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let o = scalebench(&["evaluate", "--oracle", "--out", "runs"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dirs = run_dirs(&tmp.path().join("runs"), "evaluate");
    assert_eq!(dirs.len(), 1);
    let csv = fs::read_to_string(dirs[0].join("per_scale.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows, ["1,100", "2,100", "4,100", "8,100"]);
    let m = RunManifest::read(&dirs[0].join("manifest.json")).unwrap();
    assert_eq!(m.results.auc, Some(87.5));
    assert!(fs::read_to_string(dirs[0].join("curve.svg")).unwrap().starts_with("<svg"));
    assert_eq!(m.artifacts, ["per_scale.csv", "curve.svg"]);

    // a second run never touches the first
    let before = fs::read(dirs[0].join("manifest.json")).unwrap();
    let again = scalebench(&["evaluate", "--oracle", "--out", "runs", "--factors", "1,2,4,8,16"], tmp.path());
    assert_eq!(code(&again), 0);
    assert_eq!(run_dirs(&tmp.path().join("runs"), "evaluate").len(), 2);
    assert_eq!(fs::read(dirs[0].join("manifest.json")).unwrap(), before);
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let typo = write(tmp.path(), "typo.toml", &SMALL_CD.replace("epochs = 1", "epoch = 1"));
    let o = scalebench(&["finetune", "--config", typo.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));

    let bad_taps = write(tmp.path(), "taps.toml", &SMALL_CD.replace("tap_layers = [1, 2]", "tap_layers = [1, 7]"));
    assert_eq!(code(&scalebench(&["finetune", "--config", bad_taps.to_str().unwrap()], tmp.path())), 1);

    let missing = scalebench(&["finetune", "--config", "nope.toml"], tmp.path());
    assert_eq!(code(&missing), 1);

    let no_model = scalebench(&["evaluate"], tmp.path());
    assert_eq!(code(&no_model), 1);
    assert!(stderr(&no_model).contains("--oracle"));
}

#[test]
fn oversized_models_fail_the_gate_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL_CD
        .replace("image_size = 32", "image_size = 1024")
        .replace("preset = \"tiny\"\ndepth = 2\nwidth = 16\nheads = 2", "preset = \"vit_b16\"");
    let cfg = write(tmp.path(), "big.toml", &text);
    let o = scalebench(&["finetune", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SMALL_CD}\n[train.optimizer]\npeak_lr = 1e30\nmin_lr = 0.0\nweight_decay = 0.0\n")
        .replace("epochs = 1", "epochs = 3");
    let text = text.replace("preset = \"desk_change_detection\"", "preset = \"desk_change_detection\"\ngrad_clip = 1e30");
    let cfg = write(tmp.path(), "nan.toml", &text);
    let o = scalebench(&["finetune", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn finetune_evaluate_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cd.toml", SMALL_CD);
    let cfg = cfg.to_str().unwrap();
    for extra in [&[][..], &["--scale-aug"][..]] {
        let mut args = vec!["finetune", "--config", cfg, "--seed", "3"];
        args.extend_from_slice(extra);
        let o = scalebench(&args, tmp.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let runs = run_dirs(&tmp.path().join("runs"), "finetune");
    assert_eq!(runs.len(), 2);
    for r in &runs {
        for f in ["manifest.json", "model.safetensors", "per_scale.csv", "curve.svg", "epochs.csv"] {
            assert!(r.join(f).exists(), "{f} missing in {}", r.display());
        }
    }
    let m0 = RunManifest::read(&runs[0].join("manifest.json")).unwrap();
    assert_eq!(m0.seed, 3);
    assert_eq!(m0.config["train"]["scale_aug"], false);
    assert_eq!(m0.config["data"]["train_pairs"], 8);
    assert_eq!(m0.results.per_scale.len(), 4);

    // re-evaluating the saved model reproduces the stored scores
    let ck = runs[0].join("model.safetensors");
    let eval_cfg = write(
        tmp.path(),
        "eval.toml",
        "[data]\nsource = \"synthetic_change\"\ntrain_pairs = 8\ntest_pairs = 4\nside = 32\ntrain_seed = 0\ntest_seed = 1\n",
    );
    let o = scalebench(
        &["evaluate", "--config", eval_cfg.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ev = RunManifest::read(&run_dirs(&tmp.path().join("runs"), "evaluate")[0].join("manifest.json")).unwrap();
    assert_eq!(ev.results.per_scale, m0.results.per_scale);
    assert_eq!(ev.results.auc, m0.results.auc);

    let manifests: Vec<String> = runs.iter().map(|r| r.join("manifest.json").display().to_string()).collect();
    let table_path = tmp.path().join("table.md");
    let plot_path = tmp.path().join("curves.svg");
    let o = scalebench(
        &[
            "report",
            &manifests[0],
            &manifests[1],
            "--out",
            table_path.to_str().unwrap(),
            "--plot",
            plot_path.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(fs::read_to_string(&table_path).unwrap(), table);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("| 1:1 | 1:2 | 1:4 | 1:8 | AUC |"));
    for (line, run) in lines[2..].iter().zip(&runs) {
        let m = RunManifest::read(&run.join("manifest.json")).unwrap();
        let cells: Vec<&str> = line.split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
        assert_eq!(cells[0], run.file_name().unwrap().to_string_lossy());
        let nums: Vec<f64> = cells[2..].iter().map(|c| c.parse().unwrap()).collect();
        let mut expected: Vec<f64> = m.results.per_scale.iter().map(|p| p.score).collect();
        expected.push(m.results.auc.unwrap());
        assert_eq!(nums, expected);
    }
    assert_eq!(fs::read_to_string(&plot_path).unwrap().matches("<polyline").count(), 2);
    let csv = scalebench(&["report", &manifests[0], "--format", "csv"], tmp.path());
    assert!(stdout(&csv).starts_with("run,metric,1:1,1:2,1:4,1:8,AUC"));
}

#[test]
fn identical_runs_produce_identical_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cd.toml", SMALL_CD);
    for _ in 0..2 {
        let o = scalebench(&["finetune", "--config", cfg.to_str().unwrap(), "--scale-aug"], tmp.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let runs = run_dirs(&tmp.path().join("runs"), "finetune");
    let [a, b] = [&runs[0], &runs[1]].map(|r| RunManifest::read(&r.join("manifest.json")).unwrap());
    assert_ne!(a.run_id, b.run_id);
    assert_eq!(a.config, b.config);
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(serde_json::to_string(&a.results).unwrap(), serde_json::to_string(&b.results).unwrap());
}

#[test]
fn synth_then_train_from_disk_then_pretrain_init() {
    let tmp = tempfile::tempdir().unwrap();
    for (split, seed) in [("train", "0"), ("test", "1")] {
        let o = scalebench(
            &["synth", "--out", "data", "--count", "6", "--side", "32", "--seed", seed, "--split", split],
            tmp.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for d in ["A", "B", "label"] {
        assert_eq!(fs::read_dir(tmp.path().join("data/train").join(d)).unwrap().count(), 6);
    }
    let again = scalebench(&["synth", "--out", "data", "--count", "6", "--side", "32"], tmp.path());
    assert_eq!(code(&again), 1);

    let scenes = scalebench(&["synth", "--out", "scenes", "--kind", "scenes", "--count", "8", "--side", "32"], tmp.path());
    assert_eq!(code(&scenes), 0, "{}", stderr(&scenes));
    assert_eq!(fs::read_to_string(tmp.path().join("scenes/train.txt")).unwrap().lines().count(), 8);

    let pre = write(
        tmp.path(),
        "pre.toml",
        r#"
[data]
source = "image_dir"
root = "scenes"
max_side = 64

[pretrain]
preset = "desk"
batch_size = 4
overlap_taps = [1, 2]
neck_channels = 8
decoder_channels = 8
[pretrain.backbone]
preset = "tiny"
depth = 2
width = 16
heads = 2
"#,
    );
    let o = scalebench(&["pretrain", "--config", pre.to_str().unwrap(), "--max-steps", "3", "--out", "pre"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = &run_dirs(&tmp.path().join("pre"), "pretrain")[0];
    let m = RunManifest::read(&run.join("manifest.json")).unwrap();
    assert_eq!(m.dataset.as_ref().unwrap().items, 8);
    assert!(m.artifacts.iter().any(|a| a == "teacher_step000003.safetensors"));
    assert_eq!(fs::read_to_string(run.join("pretrain_log.csv")).unwrap().lines().count(), 4);

    let teacher = run.join("teacher_step000003.safetensors");
    let text = SMALL_CD
        .replace(
            "source = \"synthetic_change\"\ntrain_pairs = 8\ntest_pairs = 4\nside = 32\ntrain_seed = 0\ntest_seed = 1",
            "source = \"change_dir\"\nroot = \"data\"",
        )
        .replacen("[data]", &format!("init_backbone = {:?}\n\n[data]", teacher.display().to_string()), 1);
    let cfg = write(tmp.path(), "disk.toml", &text);
    let o = scalebench(&["finetune", "--config", cfg.to_str().unwrap(), "--freeze", "--fusion", "concat"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("backbone tensors"));
    let run = &run_dirs(&tmp.path().join("runs"), "finetune")[0];
    let m = RunManifest::read(&run.join("manifest.json")).unwrap();
    assert_eq!(m.config["model"]["head"]["fusion"], "concat");
    assert_eq!(m.config["train"]["freeze_backbone"], true);
    assert_eq!(m.dataset.unwrap().items, 6);
}
