mod common;

use std::path::Path;
use std::process::{Command, Output};

use stfpm::archive::TensorArchive;
use stfpm::scorer::read_map;

fn stfpm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stfpm"))
        .current_dir(dir)
        .env_remove("STFPM_DATA_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn must(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout(&out),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout(&out)
}

/// Teacher archive plus a synthetic category under `data/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    common::random_teacher(7).to_archive().save(dir.path().join("teacher.safetensors")).unwrap();
    must(stfpm(
        dir.path(),
        &["synth-generate", "--out", "data", "--name", "tiny", "--train-count", "12", "--test-good", "3", "--test-defect", "3"],
    ));
    dir
}

const TRAIN: &[&str] = &["train", "--data-root", "data", "--output", "runs", "--input-size", "32", "--epochs", "2", "--batch-size", "4"];

#[test]
fn train_eval_score_visualize_dump() {
    let ws = workspace();
    let dir = ws.path();
    let out = must(stfpm(dir, TRAIN));
    assert!(out.contains("tiny: best epoch"));
    for f in ["best.safetensors", "last.safetensors", "train_log.jsonl", "config.resolved.toml", "manifest.json"] {
        assert!(dir.join("runs/tiny").join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("runs/tiny/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["epochs_run"], 2);
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("runs/manifest.json")).unwrap()).unwrap();
    assert_eq!(index["categories"]["tiny"]["best_epoch"], manifest["best_epoch"]);
    let snapshot = std::fs::read_to_string(dir.join("runs/tiny/config.resolved.toml")).unwrap();
    assert!(snapshot.starts_with("# fingerprint: "));
    assert!(snapshot.contains("epochs = 2"));

    let table = must(stfpm(dir, &["eval", "--data-root", "data", "--output", "runs"]));
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().next().unwrap().contains("tiny"));
    for f in ["report.txt", "report.json", "curves.csv"] {
        assert!(dir.join("runs/eval").join(f).is_file());
    }

    let ckpt = "runs/tiny/best.safetensors";
    let scored = must(stfpm(dir, &["score", "--checkpoint", ckpt, "data/tiny/test/blob/000.png", "data/tiny/test/good/000.png", "--out", "sc"]));
    assert_eq!(scored.lines().count(), 2);
    let first = read_map(dir.join("sc/000.bin")).unwrap();
    let second = read_map(dir.join("sc/000_1.bin")).unwrap();
    assert_eq!((first.width, first.height), (32, 32));
    assert_eq!(first.source_size, Some((64, 64)));
    assert!(first.source_id.unwrap().ends_with("blob/000.png"));
    assert!(second.source_id.unwrap().ends_with("good/000.png"));
    assert!(dir.join("sc/000.png").is_file());
    assert_eq!(std::fs::read_to_string(dir.join("sc/scores.csv")).unwrap().lines().count(), 3);

    let viz = must(stfpm(dir, &["visualize", "--checkpoint", ckpt, "--image", "data/tiny/test/good/001.png", "--out", "v"]));
    assert_eq!(viz.lines().filter(|l| l.ends_with(".png")).count(), 4);
    // three images with masks: five columns each, shared file names kept apart
    let viz = must(stfpm(
        dir,
        &[
            "visualize", "--checkpoint", ckpt, "--out", "v3",
            "--image", "data/tiny/test/blob/000.png", "--mask", "data/tiny/ground_truth/blob/000_mask.png",
            "--image", "data/tiny/test/blob/001.png", "--mask", "data/tiny/ground_truth/blob/001_mask.png",
            "--image", "data/tiny/test/good/000.png", "--mask", "data/tiny/ground_truth/blob/002_mask.png",
        ],
    ));
    assert_eq!(viz.lines().filter(|l| l.ends_with(".png")).count(), 15);
    assert!(dir.join("v3/000_2_4_fused.png").is_file());
    let out = stfpm(dir, &["visualize", "--checkpoint", ckpt, "--image", "a.png", "--image", "b.png", "--mask", "m.png"]);
    assert_eq!(code(&out), 2);
    for d in ["runs/eval", "sc", "v3"] {
        assert!(dir.join(d).join("config.resolved.toml").is_file(), "no snapshot in {d}");
    }
    let viz = must(stfpm(
        dir,
        &["visualize", "--checkpoint", ckpt, "--image", "data/tiny/test/blob/001.png", "--mask", "data/tiny/ground_truth/blob/001_mask.png", "--out", "v"],
    ));
    assert!(viz.contains("001_0_contour.png"));
    assert!(viz.contains("001_4_fused.png"));

    let dump = must(stfpm(dir, &["dump-features", "--checkpoint", ckpt, "--image", "data/tiny/test/good/000.png", "--out", "f.jsonl"]));
    let lines = std::fs::read_to_string(dir.join("f.jsonl")).unwrap().lines().count();
    assert!(dump.contains(&format!("wrote {lines} feature vectors")));

    // evaluating with another pyramid than the one trained is refused
    let out = stfpm(dir, &["eval", "--data-root", "data", "--output", "runs", "--blocks", "2,3"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("blocks"));
}

#[test]
fn reduced_training_set_and_single_class_test_set() {
    let ws = workspace();
    let dir = ws.path();
    let mut args = TRAIN.to_vec();
    args.extend(["--train-fraction", "0.5"]);
    must(stfpm(dir, &args));
    let log = std::fs::read_to_string(dir.join("runs/tiny/train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    // 12 images, 20% held out for validation, half of the rest kept
    assert_eq!(first["val_count"], 2);
    assert_eq!(first["train_count"], 5);

    // without defective test images the AUC is undefined
    std::fs::remove_dir_all(dir.join("data/tiny/test/blob")).unwrap();
    std::fs::remove_dir_all(dir.join("data/tiny/ground_truth")).unwrap();
    let out = stfpm(dir, &["eval", "--data-root", "data", "--output", "runs"]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_drives_a_run() {
    let ws = workspace();
    let dir = ws.path();
    std::fs::write(
        dir.join("run.toml"),
        "[paths]\ndata_root = \"data\"\noutput = \"from-config\"\n[pyramid]\nblocks = [3, 4]\n[train]\nepochs = 1\ninput_size = 32\nbatch_size = 4\n",
    )
    .unwrap();
    must(stfpm(dir, &["train", "--config", "run.toml"]));
    let best = stfpm::trainer::Checkpoint::load(dir.join("from-config/tiny/best.safetensors")).unwrap();
    assert_eq!(best.pyramid.blocks, vec![3, 4]);
    must(stfpm(dir, &["eval", "--config", "run.toml", "--out", "rep"]));
    assert!(dir.join("rep/report.json").is_file());

    // the environment overrides the configured data root
    let out = Command::new(env!("CARGO_BIN_EXE_stfpm"))
        .current_dir(dir)
        .env("STFPM_DATA_ROOT", "elsewhere")
        .args(["train", "--config", "run.toml"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn failures_map_to_exit_codes() {
    let ws = workspace();
    let dir = ws.path();
    assert_eq!(code(&stfpm(dir, &["train", "--teacher", "missing.safetensors", "--data-root", "data"])), 2);
    assert_eq!(code(&stfpm(dir, &["train", "--data-root", "nowhere", "--input-size", "32"])), 3);
    std::fs::write(dir.join("bad.toml"), "[train]\nepochs = \"many\"\n").unwrap();
    assert_eq!(code(&stfpm(dir, &["train", "--config", "bad.toml"])), 2);
    std::fs::write(dir.join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    assert_eq!(code(&stfpm(dir, &["train", "--config", "typo.toml"])), 2);
    assert_eq!(code(&stfpm(dir, &["eval", "--data-root", "data", "--output", "nothing-trained"])), 2);
    assert_eq!(code(&stfpm(dir, &["no-such-command"])), 2);
    std::fs::write(dir.join("junk.safetensors"), b"\x10\x00\x00\x00\x00\x00\x00\x00{}").unwrap();
    assert_eq!(code(&stfpm(dir, &["train", "--teacher", "junk.safetensors", "--data-root", "data", "--input-size", "32"])), 2);
    assert_eq!(code(&stfpm(dir, &["score", "--checkpoint", "absent.safetensors", "x.png"])), 6);
    assert!(stfpm(dir, &["--help"]).status.success());
}

#[test]
fn fetch_teacher_imports_plain_state_dicts() {
    let dir = tempfile::tempdir().unwrap();
    let mut plain = common::random_teacher(3).to_archive();
    plain.metadata.clear();
    plain.save(dir.path().join("plain.safetensors")).unwrap();
    must(stfpm(
        dir.path(),
        &["fetch-teacher", "--from", "plain.safetensors", "--arch", "toy-resnet", "--input-size", "48", "--out", "t/imported.safetensors"],
    ));
    let archive = TensorArchive::load(dir.path().join("t/imported.safetensors")).unwrap();
    let handle = stfpm::backbone::NetworkHandle::from_archive(&archive, true).unwrap();
    assert_eq!(handle.input_size(), 48);
    assert_eq!(handle.header().normalization, stfpm::backbone::Normalization::imagenet());
    assert_eq!(handle.checksum(), common::random_teacher(3).checksum());

    // wrong architecture for the tensors is a load (config) failure
    let out = stfpm(dir.path(), &["fetch-teacher", "--from", "plain.safetensors", "--arch", "resnet18", "--out", "x.safetensors"]);
    assert_eq!(code(&out), 2);
}
