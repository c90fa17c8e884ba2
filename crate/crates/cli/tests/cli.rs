use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsppnet::data::GrayImage;
use dsppnet::Checkpoint;

const TINY: &str = "\
input_height = 16
input_width = 16
stage_channels = 4,4,6,6,8,8
dspp_channels = 4
dspp_stages = 5,6
synth_per_class = 12
synth_radius = 3,4
synth_intensity = 0.8
lr_max = 0.01
batch_size = 8
";

fn dsppnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsppnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("DSPPNET_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = dsppnet(args, dir);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn rates_prints_schedule() {
    let dir = workspace();
    let csv = ok(&["rates"], dir.path());
    let rates: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(rates, ["12", "6", "3"]);
    let csv = ok(&["rates", "--set", "alpha=1"], dir.path());
    assert!(csv.ends_with("4,8,8,8,4,4\n5,4,4,16,2,2\n6,2,2,32,1,1\n"), "{csv}");
    let csv = ok(&["rates", "--set", "dspp_stages=6"], dir.path());
    assert_eq!(csv.lines().nth(1), Some("6,2,2,32,3,3"));
}

#[test]
fn train_writes_outputs_deterministically() {
    let dir = workspace();
    let p = dir.path();
    let files = ["last.ckpt", "best.ckpt", "history.csv", "config.txt"];
    ok(&["train", "--config", "tiny.cfg", "--epochs", "1", "--out", "a"], p);
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(p, &format!("a/{f}"))).collect();
    ok(&["train", "--config", "tiny.cfg", "--epochs", "1", "--out", "a"], p);
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&read(p, &format!("a/{f}")), bytes, "{f}");
    }
    let history = String::from_utf8(read(p, "a/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    ok(
        &[
            "train", "--config", "tiny.cfg", "--epochs", "1", "--seed", "1", "--out", "c",
        ],
        p,
    );
    assert_ne!(read(p, "a/last.ckpt"), read(p, "c/last.ckpt"));
}

#[test]
fn output_directory_from_environment() {
    let dir = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_dsppnet"))
        .args(["train", "--config", "tiny.cfg", "--epochs", "1"])
        .current_dir(dir.path())
        .env("DSPPNET_OUT", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/last.ckpt").exists());
}

#[test]
fn test_split_gets_metrics() {
    let dir = workspace();
    ok(
        &[
            "train",
            "--config",
            "tiny.cfg",
            "--epochs",
            "1",
            "--set",
            "split=0.5,0.25,0.25",
            "--out",
            "t",
        ],
        dir.path(),
    );
    let m = String::from_utf8(read(dir.path(), "t/test_metrics.csv")).unwrap();
    assert!(m.starts_with("metric,value\naccuracy,"));
}

#[test]
fn describe_lists_modules() {
    let dir = workspace();
    let text = ok(&["train", "--describe"], dir.path());
    assert!(text.lines().last().unwrap().ends_with(" 1117819"), "{text}");
    assert!(text.contains("cid.gate") && text.contains("dspp.branch4 (rate 12)"));
    let plain = ok(
        &["train", "--describe", "--set", "dspp_stages=", "--set", "use_cid=false"],
        dir.path(),
    );
    assert_ne!(plain, text);
}

#[test]
fn eval_reproduces_last_history_row() {
    let dir = workspace();
    let p = dir.path();
    ok(&["train", "--config", "tiny.cfg", "--epochs", "2", "--out", "m"], p);
    let metrics = ok(
        &[
            "eval",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "m/last.ckpt",
            "--out",
            "e",
        ],
        p,
    );
    let history = String::from_utf8(read(p, "m/history.csv")).unwrap();
    let last: Vec<&str> = history.lines().last().unwrap().split(',').collect();
    let values: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, last[3..]);
    assert_eq!(read(p, "e/metrics.csv"), metrics.as_bytes());
    assert!(String::from_utf8(read(p, "e/roc.csv"))
        .unwrap()
        .starts_with("fpr,tpr\n"));
}

#[test]
fn ablate_writes_six_rows() {
    let dir = workspace();
    let p = dir.path();
    let csv = ok(&["ablate", "--config", "tiny.cfg", "--epochs", "1", "--out", "x"], p);
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",ok")), "{csv}");
    let again = ok(&["ablate", "--config", "tiny.cfg", "--epochs", "1", "--out", "y"], p);
    assert_eq!(csv, again);
    assert_eq!(read(p, "x/ablation.csv"), csv.as_bytes());
}

fn first_positive(dir: &Path) -> PathBuf {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("s/data/1_positive"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.remove(0)
}

#[test]
fn gradcam_writes_maps_at_input_size() {
    let dir = workspace();
    let p = dir.path();
    ok(&["synth", "--config", "tiny.cfg", "--out", "s"], p);
    ok(&["train", "--config", "tiny.cfg", "--epochs", "1", "--out", "m"], p);
    let image = first_positive(p);
    let image = image.to_str().unwrap();
    let line = ok(
        &[
            "gradcam",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "m/last.ckpt",
            "--image",
            image,
            "--out",
            "g",
        ],
        p,
    );
    assert!(line.contains("layer 6"), "{line}");
    for name in ["gradcam.pgm", "attention.pgm"] {
        let map = GrayImage::decode_pgm(&read(p, &format!("g/{name}"))).unwrap();
        assert_eq!((map.width, map.height), (16, 16), "{name}");
    }
    assert!(read(p, "g/gradcam_overlay.ppm").starts_with(b"P6\n16 16\n255\n"));
    let args = [
        "gradcam",
        "--config",
        "tiny.cfg",
        "--checkpoint",
        "m/last.ckpt",
        "--image",
        image,
        "--layer",
        "4",
        "--out",
        "h",
    ];
    assert!(ok(&args, p).contains("layer 4"));
    ok(&args, p);
    let first = read(p, "h/gradcam.pgm");
    ok(&args, p);
    assert_eq!(first, read(p, "h/gradcam.pgm"));
}

#[test]
fn finetune_zero_epochs_keeps_parameters() {
    let dir = workspace();
    let p = dir.path();
    ok(&["train", "--config", "tiny.cfg", "--epochs", "1", "--out", "m"], p);
    ok(
        &[
            "finetune",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "m/last.ckpt",
            "--epochs",
            "0",
            "--out",
            "f",
        ],
        p,
    );
    let before = Checkpoint::load(&p.join("m/last.ckpt")).unwrap();
    let after = Checkpoint::load(&p.join("f/last.ckpt")).unwrap();
    assert_eq!(before.model, after.model);
    ok(
        &[
            "finetune",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "m/last.ckpt",
            "--epochs",
            "2",
            "--out",
            "f2",
        ],
        p,
    );
    let tuned = Checkpoint::load(&p.join("f2/last.ckpt")).unwrap();
    assert_eq!(tuned.epoch, 3);
}

#[test]
fn usage_errors_exit_two() {
    let dir = workspace();
    let p = dir.path();
    fs::write(p.join("bad.cfg"), "alpha = zero\n").unwrap();
    fs::write(p.join("empty.cfg"), "").unwrap();
    for args in [
        vec!["train", "--set", "bogus=1"],
        vec!["train", "--config", "bad.cfg"],
        vec!["train", "--config", "missing.cfg"],
        vec!["rates", "--set", "dspp_stages=3"],
        vec!["frobnicate"],
        vec!["gradcam", "--checkpoint", "x"],
    ] {
        assert_eq!(dsppnet(&args, p).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(ok(&["rates", "--config", "empty.cfg"], p), ok(&["rates"], p));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = workspace();
    let p = dir.path();
    let out = dsppnet(
        &[
            "train", "--config", "tiny.cfg", "--epochs", "1", "--lr", "1e200", "--out", "d",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epoch 1") && err.contains("batch"), "{err}");

    fs::write(p.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = dsppnet(&["eval", "--config", "tiny.cfg", "--checkpoint", "junk.ckpt"], p);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        dsppnet(&["eval", "--config", "tiny.cfg", "--checkpoint", "nowhere.ckpt"], p)
            .status
            .code(),
        Some(1)
    );
}
