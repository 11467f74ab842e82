//! End-to-end runs of the `egowm` binary on tiny configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "frames=5",
    "size=16",
    "latent_channels=4",
    "channel_div=16",
    "norm_groups=1",
    "width=8",
    "blocks=2",
    "adapter_depth=1",
    "heads=2",
    "mlp_ratio=2",
    "context_tokens=2",
    "codec_steps=20",
    "codec_lr=1e-2",
    "lr=1e-3",
    "batch=2",
];

fn egowm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egowm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = egowm(args);
    assert!(
        out.status.success(),
        "egowm {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(out: &Path, clips: &str, frames: &str, size: &str) {
    ok(&["gen-data", "--seed", "3", "--clips", clips, "--frames", frames, "--size", size, "--window", "5", "--out", s(out)]);
}

fn train_args<'a>(data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec!["train", "--data", s(data), "--out", s(out)];
    for kv in TINY.iter().chain(extra) {
        a.push("--set");
        a.push(kv);
    }
    a
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "2", "9", "16");
    gen(&b, "2", "9", "16");
    assert!(a.join("clip_0000").is_dir() && a.join("clip_0001").is_dir());
    assert!(!a.join("clip_0002").exists());
    assert!(a.join("config.txt").is_file());
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
}

#[test]
fn shape_audit_paper_passes_and_is_stable() {
    let first = ok(&["shape-audit", "--scale", "paper"]);
    let second = ok(&["shape-audit", "--scale", "paper"]);
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.contains("5120"), "{text}");
    ok(&["shape-audit", "--scale", "desk"]);
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "2", "5", "16");
    let out = tmp.path().join("eval");
    ok(&["eval", "--gt", s(&data), "--pred", s(&data), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3, "two clips plus the macro row");
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for row in &rows {
        assert_eq!(row[col("psnr")].parse::<f64>().unwrap(), 99.0);
        assert_eq!(row[col("ssim")].parse::<f64>().unwrap(), 1.0);
        assert_eq!(row[col("ope")].parse::<f64>().unwrap(), 0.0);
    }
    assert!(out.join("summary.txt").is_file() && out.join("config.txt").is_file());
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(egowm(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(egowm(&["shape-audit", "--scale", "huge"]).status.code(), Some(2));
    assert_eq!(egowm(&["shape-audit", "--set", "frames=8"]).status.code(), Some(2));
    let missing = tmp.path().join("missing");
    assert_eq!(egowm(&["eval", "--gt", s(&missing), "--pred", s(&missing), "--out", s(tmp.path())]).status.code(), Some(3));

    // A clip directory paired with a root of clips is a layout mismatch.
    let data = tmp.path().join("data");
    gen(&data, "1", "5", "16");
    let out = tmp.path().join("eval");
    let code = egowm(&["eval", "--gt", s(&data.join("clip_0000")), "--pred", s(&data), "--out", s(&out)]).status.code();
    assert_eq!(code, Some(3));
}

fn loss_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("loss.csv")).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "2", "5", "16");

    let full = tmp.path().join("full");
    ok(&train_args(&data, &full, &["train_steps=4"]));
    let part = tmp.path().join("part");
    ok(&train_args(&data, &part, &["train_steps=2"]));
    let ckpt = part.join("checkpoint");
    let mut resume = vec!["train", "--data", s(&data), "--out", s(&part), "--resume", s(&ckpt), "--set", "train_steps=4"];
    ok(&resume);
    assert_eq!(loss_rows(&full), loss_rows(&part));
    assert_eq!(loss_rows(&full).len(), 4);
    assert_eq!(read_dir_bytes(&full.join("checkpoint")), read_dir_bytes(&part.join("checkpoint")));

    // Changing the architecture on resume is refused.
    resume.extend(["--set", "width=16"]);
    assert_eq!(egowm(&resume).status.code(), Some(2));

    // Rollouts are a pure function of checkpoint, clip and seed.
    let clip = data.join("clip_0000");
    let roll = |out: &Path, seed: &str| {
        ok(&["rollout", "--checkpoint", s(&ckpt), "--clip", s(&clip), "--steps", "5", "--seed", seed, "--out", s(out), "--png"]);
    };
    let (r1, r2, r3) = (tmp.path().join("r1"), tmp.path().join("r2"), tmp.path().join("r3"));
    roll(&r1, "9");
    roll(&r2, "9");
    roll(&r3, "10");
    assert!(r1.join("frame_004.png").is_file());
    let rgb = |d: &Path| fs::read(d.join("rgb.tns")).unwrap();
    assert_eq!(rgb(&r1), rgb(&r2));
    assert_ne!(rgb(&r1), rgb(&r3));

    // The rollout directory is itself a clip, so it can be evaluated.
    let ev = tmp.path().join("ev");
    ok(&["eval", "--gt", s(&clip), "--pred", s(&r1), "--out", s(&ev), "--no-poses"]);
    assert_eq!(fs::read_to_string(ev.join("report.csv")).unwrap().lines().count(), 3);
}
