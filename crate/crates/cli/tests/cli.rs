use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--bench",
    "--set",
    "model.queries=8",
    "--set",
    "model.backbone_channels=[8, 8, 12, 16]",
    "--set",
    "model.attention.d_model=16",
    "--set",
    "model.attention.heads=2",
    "--set",
    "model.attention.points=2",
    "--set",
    "model.attention.ffn_width=24",
    "--set",
    "temporal.min_keep=2",
    "--set",
    "optim.batch_size=3",
];

fn vepe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vepe")).args(args).env("VEPE_DETERMINISTIC", "1").output().unwrap()
}

fn tiny(args: &[&str]) -> Output {
    let all: Vec<&str> = TINY.iter().copied().chain(args.iter().copied()).collect();
    vepe(&all)
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(vepe(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(vepe(&["eval"]).status.code(), Some(2));
    assert_eq!(vepe(&["--set", "optim.lr", "config"]).status.code(), Some(2));
    assert_eq!(vepe(&["--set", "optim.lr=-1", "config"]).status.code(), Some(2));
    assert_eq!(vepe(&["--set", "optim.nope=1", "config"]).status.code(), Some(2));
}

#[test]
fn config_applies_overrides() {
    let text = ok(&vepe(&["--bench", "--seed", "17", "--set", "optim.lr=0.005", "config"]));
    assert!(text.contains("seed = 17"));
    assert!(text.contains("lr = 0.005"));
    assert!(text.contains("image_size = 64"));
}

#[test]
fn gradcheck_fixture_makes_the_run_fail() {
    let good = vepe(&["gradcheck"]);
    ok(&good);
    let bad = vepe(&["gradcheck", "--with-fixture"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn probe_is_refused_in_deterministic_mode() {
    assert_eq!(vepe(&["--bench", "probe"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&tiny(&["generate", "--count", "1", "--out", s(&data)]));
    let out = tiny(&["eval", "--ckpt", s(&dir.path().join("absent.ckpt")), "--data", s(&data), "--mode", "spatial"]);
    assert_eq!(out.status.code(), Some(1));
}

/// Runs generate, spatial and temporal training, eval, sweep and infer in `dir`.
fn pipeline(dir: &Path) -> Vec<String> {
    let data = dir.join("data");
    let (sp, tp) = (dir.join("spatial.ckpt"), dir.join("temporal.ckpt"));
    let mut stdout = Vec::new();
    stdout.push(ok(&tiny(&["generate", "--count", "2", "--out", s(&data), "--split", "clean", "--split", "fast"])));
    stdout.push(ok(&tiny(&["train", "--data", s(&data), "--out", s(&sp), "--mode", "spatial", "--epochs", "1"])));
    assert_eq!(tiny(&["train", "--data", s(&data), "--out", s(&tp), "--mode", "temporal"]).status.code(), Some(2));
    stdout.push(ok(&tiny(&["train", "--data", s(&data), "--out", s(&tp), "--mode", "temporal", "--init", s(&sp), "--epochs", "1"])));
    stdout.push(ok(&tiny(&["eval", "--ckpt", s(&tp), "--data", s(&data), "--mode", "temporal", "--out", s(&dir.join("report.txt"))])));
    stdout.push(ok(&tiny(&["sweep-threshold", "--ckpt", s(&tp), "--data", s(&data), "--out", s(&dir.join("sweep.txt"))])));
    let clip = data.join("clip-00000.clip");
    stdout.push(ok(&tiny(&["infer", "--ckpt", s(&tp), "--clip", s(&clip), "--out", s(&dir.join("infer"))])));
    stdout.into_iter().map(|o| o.replace(s(dir), "<dir>")).collect()
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(pipeline(a.path()), pipeline(b.path()));
    let files = [
        "data/manifest.txt",
        "spatial.ckpt",
        "spatial.log",
        "temporal.ckpt",
        "temporal.log",
        "report.txt",
        "sweep.txt",
        "infer/poses.txt",
        "infer/diagnostics.txt",
        "infer/frame-000.ppm",
    ];
    for f in files {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
    let sweep = std::fs::read_to_string(a.path().join("sweep.txt")).unwrap();
    assert_eq!(sweep.lines().filter(|l| l.starts_with("0.")).count(), 5, "{sweep}");
}
