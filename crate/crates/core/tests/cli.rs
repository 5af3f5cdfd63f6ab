use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_patchdiff");

fn run(dir: &Path, threads: &str, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("PATCHDIFF_THREADS", threads)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, threads: &str, args: &[&str]) -> String {
    let out = run(dir, threads, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

const TINY_CONFIG: &str = "patch_size = 4\nnet_width = 4\nnet_depth = 2\nbatch = 4\ntrain_steps = 3\nsteps = 4\nK = 2\n";

/// Full pipeline in `dir` with the given thread cap.
fn pipeline(dir: &Path, threads: &str) {
    std::fs::write(dir.join("cfg.txt"), TINY_CONFIG).unwrap();
    ok(dir, threads, &["phantom", "--n", "3", "--size", "8", "--seed", "4", "--out", "data"]);
    ok(dir, threads, &["project", "--vol", "data/phantom_0000.pdv", "--views", "4", "--noise-sigma", "0.01", "--seed", "2", "--out", "y.pds"]);
    ok(dir, threads, &["fbp", "--sino", "y.pds", "--out", "fbp.pdv"]);
    ok(dir, threads, &["train", "--data", "data", "--config", "cfg.txt", "--out", "m.pdck"]);
    ok(dir, threads, &["sample", "--ckpt", "m.pdck", "--steps", "3", "--eta", "0.4", "--K", "1", "--seed", "5", "--out", "s.pdv"]);
    ok(dir, threads, &["reconstruct", "--ckpt", "m.pdck", "--sino", "y.pds", "--steps", "3", "--eta", "0.8", "--K", "2", "--cg-iters", "2", "--seed", "5", "--out", "r.pdv"]);
}

#[test]
fn every_subcommand_is_deterministic_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "1");
    pipeline(b.path(), "3");
    for f in ["data/phantom_0000.pdv", "data/phantom_0002.pdv", "y.pds", "fbp.pdv", "m.pdck", "m.csv", "s.pdv", "r.pdv"] {
        assert_eq!(bytes(a.path(), f), bytes(b.path(), f), "{f} differs");
    }
    let curve = String::from_utf8(bytes(a.path(), "m.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("step,loss,ema_loss"));
    assert_eq!(curve.lines().count(), 4);

    let nn = ok(a.path(), "1", &["eval", "nn", "--vol", "data/phantom_0001.pdv", "--data", "data"]);
    assert!(nn.contains("index=1\n") && nn.contains("distance=0\n"), "{nn}");
    let psnr = ok(a.path(), "1", &["eval", "psnr", "--a", "r.pdv", "--b", "data/phantom_0000.pdv"]);
    let v: f64 = psnr.trim().strip_prefix("psnr=").unwrap().parse().unwrap();
    assert!(v.is_finite());
    let bnd = ok(a.path(), "1", &["eval", "boundary", "--vol", "s.pdv", "--patch-size", "4"]);
    assert!(bnd.starts_with("boundary="));
}

#[test]
fn resume_continues_the_loss_curve() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("cfg.txt"), TINY_CONFIG).unwrap();
    ok(p, "1", &["phantom", "--n", "2", "--size", "8", "--out", "data"]);
    ok(p, "1", &["train", "--data", "data", "--config", "cfg.txt", "--out", "full.pdck", "--steps", "4"]);
    ok(p, "1", &["train", "--data", "data", "--config", "cfg.txt", "--out", "part.pdck", "--steps", "2"]);
    let out = ok(p, "1", &["train", "--data", "data", "--config", "cfg.txt", "--out", "part.pdck", "--steps", "4", "--resume"]);
    assert!(out.contains("steps=4"));
    assert_eq!(bytes(p, "full.pdck"), bytes(p, "part.pdck"));
    assert_eq!(bytes(p, "full.csv"), bytes(p, "part.csv"));
}

#[test]
fn identical_volumes_give_infinite_psnr() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), "1", &["phantom", "--n", "1", "--size", "4", "--out", "."]);
    let out = ok(d.path(), "1", &["eval", "psnr", "--a", "phantom_0000.pdv", "--b", "phantom_0000.pdv"]);
    assert_eq!(out, "psnr=inf\n");
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    // missing file: i/o
    let out = run(p, "1", &["fbp", "--sino", "missing.pds", "--out", "x.pdv"]);
    assert_eq!(out.status.code(), Some(2));
    // bad flag and bad value: validation
    assert_eq!(run(p, "1", &["fbp", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(p, "1", &["phantom", "--n", "0", "--size", "4", "--out", "d"]).status.code(), Some(1));
    // malformed header: validation, one-line diagnostic
    std::fs::write(p.join("bad.pdv"), b"NOPE\x01\x00\x00\x00").unwrap();
    let out = run(p, "1", &["eval", "boundary", "--vol", "bad.pdv"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
    // unknown config key
    std::fs::write(p.join("cfg.txt"), "learning_rate = 1\n").unwrap();
    ok(p, "1", &["phantom", "--n", "1", "--size", "4", "--out", "data"]);
    let out = run(p, "1", &["train", "--data", "data", "--config", "cfg.txt", "--out", "m.pdck"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn raw_import_matches_volume_file() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, "1", &["phantom", "--n", "1", "--size", "8", "--out", "."]);
    std::fs::write(p.join("v.raw"), &bytes(p, "phantom_0000.pdv")[20..]).unwrap();
    ok(p, "1", &["project", "--vol", "phantom_0000.pdv", "--views", "3", "--out", "a.pds"]);
    ok(p, "1", &["project", "--import-raw", "v.raw", "8", "8", "8", "--views", "3", "--out", "b.pds"]);
    assert_eq!(bytes(p, "a.pds"), bytes(p, "b.pds"));
}
