//! Black-box checks of the `tdm-edit` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL: &str = "\
[run]
seed = 5
[data]
count = 24
held_out = 3
[model]
blocks = 2
heads = 2
head_dim = 8
mlp_hidden = 32
injection_blocks = 1
[train]
epochs = 2
[edit]
steps = 8
k_front = 2
k_tail = 2
injection_blocks = 1
[eval]
pairs = 2
";

fn tdm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdm-edit"))
        .current_dir(root)
        .args(["--config", "small.cfg"])
        .args(args)
        .output()
        .expect("spawn tdm-edit")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = tdm(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const MODEL: [&str; 4] = [
    "--set",
    "run.dataset=gen",
    "--set",
    "run.checkpoint=train/model.ckpt",
];

fn with_model<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&MODEL);
    v
}

/// A directory with `gen/` and `train/` already produced.
fn world() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    ok(dir.path(), &["gen", "--out", "gen"]);
    ok(
        dir.path(),
        &["train", "--set", "run.dataset=gen", "--out", "train"],
    );
    dir
}

fn manifest_value(path: &Path, key: &str) -> String {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {}", path.display()))
        .to_string()
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn gen_writes_the_dataset_layout() {
    let w = world();
    let gen = w.path().join("gen");
    assert!(gen.join("manifest.txt").is_file());
    assert_eq!(fs::read_dir(gen.join("train")).unwrap().count(), 24);
    for i in 0..3 {
        for part in ["source.ppm", "target.ppm", "mask.pgm"] {
            assert!(gen.join("pairs").join(format!("{i:03}_{part}")).is_file());
        }
    }
}

#[test]
fn zero_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let out = tdm(dir.path(), &["gen", "--set", "data.count=0", "--out", "g"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("g").exists());
}

#[test]
fn loss_history_has_one_line_per_step() {
    let w = world();
    let train = w.path().join("train");
    let steps: usize = manifest_value(&train.join("manifest.txt"), "steps")
        .parse()
        .unwrap();
    let per_epoch: usize = manifest_value(&train.join("manifest.txt"), "batches_per_epoch")
        .parse()
        .unwrap();
    assert_eq!(steps, 2 * per_epoch);
    let history = fs::read_to_string(train.join("loss_history.txt")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "step loss");
    assert_eq!(lines.len(), steps + 1);
}

#[test]
fn resuming_for_zero_epochs_keeps_the_checkpoint() {
    let w = world();
    ok(
        w.path(),
        &[
            "train",
            "--set",
            "run.dataset=gen",
            "--set",
            "train.resume=train/model.ckpt",
            "--set",
            "train.epochs=0",
            "--out",
            "resumed",
        ],
    );
    assert_eq!(
        sha(&w.path().join("train/model.ckpt")),
        sha(&w.path().join("resumed/model.ckpt"))
    );
}

#[test]
fn edit_writes_one_map_per_blending_step() {
    let w = world();
    ok(
        w.path(),
        &with_model(&["edit", "--pair", "0", "--out", "e"]),
    );
    let e = w.path().join("e");
    let pgms = fs::read_dir(e.join("maps"))
        .unwrap()
        .filter(|p| {
            let n = p.as_ref().unwrap().file_name();
            let n = n.to_string_lossy();
            n.starts_with("divergence_") && n.ends_with(".pgm")
        })
        .count();
    // 8 steps, 2 in front, 2 at the tail
    assert_eq!(pgms, 4);
    for f in ["mask.pgm", "mask_soft.pgm", "edited.ppm", "gt_mask.pgm"] {
        assert!(e.join(f).is_file(), "{f}");
    }
}

#[test]
fn missing_checkpoint_leaves_no_output() {
    let w = world();
    let out = tdm(
        w.path(),
        &[
            "edit",
            "--set",
            "run.dataset=gen",
            "--set",
            "run.checkpoint=nope.ckpt",
            "--pair",
            "0",
            "--out",
            "e",
        ],
    );
    assert!(!out.status.success());
    assert!(!w.path().join("e").exists());
}

#[test]
fn scoring_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let out = tdm(
        dir.path(),
        &["eval", "--results", "empty", "--out", "report"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_means_are_means_of_the_pairs() {
    let w = world();
    ok(w.path(), &with_model(&["eval", "--out", "ev"]));
    let text = fs::read_to_string(w.path().join("ev/report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    let pairs = report["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 2);
    for key in ["psnr", "background_psnr", "mask_iou"] {
        let mean = pairs.iter().map(|p| p[key].as_f64().unwrap()).sum::<f64>() / pairs.len() as f64;
        let got = report[format!("mean_{key}")].as_f64().unwrap();
        assert!((mean - got).abs() < 1e-9, "{key}: {mean} vs {got}");
    }

    // rescoring the written pairs gives the same report
    ok(
        w.path(),
        &["eval", "--results", "ev/pairs", "--out", "again"],
    );
    assert_eq!(
        fs::read(w.path().join("again/report.json")).unwrap(),
        text.as_bytes()
    );
}

#[test]
fn sweep_writes_one_report_per_value() {
    let w = world();
    ok(
        w.path(),
        &with_model(&["eval", "--sweep", "edit.k_front=0,1,2,3,4", "--out", "sw"]),
    );
    for k in 0..=4 {
        assert!(w
            .path()
            .join(format!("sw/k_front_{k}/report.json"))
            .is_file());
    }
    let summary = fs::read_to_string(w.path().join("sw/sweep.txt")).unwrap();
    assert_eq!(summary.lines().count(), 6);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    ok(
        dir.path(),
        &["--seed", "9", "gen", "--set", "data.count=12", "--out", "g"],
    );
    let written = fs::read_to_string(dir.path().join("g/config.txt")).unwrap();
    assert!(written.contains("seed = 9"), "{written}");
    assert!(written.contains("count = 12"), "{written}");
    assert_eq!(
        fs::read_dir(dir.path().join("g/train")).unwrap().count(),
        12
    );

    // the written config alone reproduces the run
    let out = Command::new(env!("CARGO_BIN_EXE_tdm-edit"))
        .current_dir(dir.path())
        .args(["--config", "g/config.txt", "gen", "--out", "g2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        sha(&dir.path().join("g/manifest.txt")),
        sha(&dir.path().join("g2/manifest.txt"))
    );
}

#[test]
fn unknown_keys_and_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let bad_key = tdm(dir.path(), &["gen", "--set", "data.colour=red"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_flag = tdm(dir.path(), &["gen", "--frobnicate"]);
    assert_eq!(bad_flag.status.code(), Some(2));
}

#[test]
fn identity_edit_reconstructs_the_source() {
    let w = world();
    ok(
        w.path(),
        &with_model(&[
            "edit",
            "--source",
            "gen/pairs/000_source.ppm",
            "--c-src",
            "1",
            "--c-tgt",
            "1",
            "--set",
            "edit.k_front=8",
            "--set",
            "edit.k_tail=0",
            "--out",
            "id",
        ]),
    );
    let db: f64 = manifest_value(&w.path().join("id/manifest.txt"), "psnr_vs_source")
        .parse()
        .unwrap();
    assert!(db >= 30.0, "{db}");
}

#[test]
fn invert_round_trip_is_recorded() {
    let w = world();
    ok(
        w.path(),
        &with_model(&["invert", "--pair", "2", "--out", "inv"]),
    );
    let inv = w.path().join("inv");
    for f in ["inversion.traj", "denoising.traj", "reconstructed.ppm"] {
        assert!(inv.join(f).is_file(), "{f}");
    }
    let db: f64 = manifest_value(&inv.join("manifest.txt"), "round_trip_psnr")
        .parse()
        .unwrap();
    assert!(db >= 30.0, "{db}");
}
