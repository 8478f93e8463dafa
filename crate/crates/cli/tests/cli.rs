//! End-to-end tests of the `retriever` binary: exit codes, determinism,
//! artifact layout.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn retriever(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retriever"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

const SMALL_SPEC: &str = "domain=sequence\nn=12\na=4\ns_true=2\nd=16\nsegment_len=3\nnoise_sigma=0.05\ncount=48\nseed=11\n";

const SMALL_CONFIG: &str = "domain=sequence\nd_raw=16\nd=16\nd_c=16\nd_s=16\nd_ffn=32\nl_e=0\nl_s=1\nl_d=1\nm=4\nheads=2\ngroups=2\nentries=4\nkernel=5\nbatch=8\nepochs=1\nseed=5\nckpt_every=0\n";

#[test]
fn generate_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    write(&spec, SMALL_SPEC);
    let out = dir.path().join("data");
    let r = retriever(&["generate", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["dataset.manifest", "tokens.blob", "labels.csv", "dict.blob", "run_manifest.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    // Every artifact listed in the manifest exists.
    let manifest = fs::read_to_string(out.join("run_manifest.txt")).unwrap();
    for line in manifest.lines() {
        if let Some(path) = line.strip_prefix("artifact ") {
            assert!(Path::new(path).exists(), "listed artifact missing: {path}");
        }
    }
}

#[test]
fn generate_same_seed_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    write(&spec, SMALL_SPEC);
    let hash_of = |out: &Path| {
        let r = retriever(&["generate", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(r.status.success());
        let manifest = fs::read_to_string(out.join("dataset.manifest")).unwrap();
        manifest
            .lines()
            .find(|l| l.starts_with("hash "))
            .unwrap()
            .to_string()
    };
    let h1 = hash_of(&dir.path().join("a"));
    let h2 = hash_of(&dir.path().join("b"));
    assert_eq!(h1, h2);
}

#[test]
fn malformed_spec_key_exits_2_and_names_key() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    write(&spec, "domain=sequence\nnot_a_key=7\n");
    let r = retriever(&["generate", "--spec", spec.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("not_a_key"), "stderr: {err}");
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    write(&spec, SMALL_SPEC);
    let data = dir.path().join("data");
    assert!(retriever(&["generate", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]).status.success());
    let cfg = dir.path().join("bad.cfg");
    write(&cfg, "domain=sequence\nheads=5\n");
    let r = retriever(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn dry_run_prints_param_count_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.cfg");
    write(&cfg, SMALL_CONFIG);
    let r = retriever(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", "/nonexistent",
        "--out", dir.path().join("run").to_str().unwrap(), "--dry-run",
    ]);
    assert!(r.status.success());
    let out = String::from_utf8_lossy(&r.stdout);
    assert!(out.contains("parameters"), "stdout: {out}");
}

#[test]
fn train_eval_transfer_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    write(&spec, SMALL_SPEC);
    let data = dir.path().join("data");
    assert!(retriever(&["generate", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]).status.success());

    let cfg = dir.path().join("m.cfg");
    write(&cfg, SMALL_CONFIG);
    let run = dir.path().join("run");
    let r = retriever(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(run.join("model.ckpt").exists());
    assert!(run.join("train_log.csv").exists());
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("step,tau,lr"));
    assert_eq!(log.lines().count(), 1 + 6); // header + 48/8 steps

    // Eval writes the report files.
    let eval = dir.path().join("eval");
    let r = retriever(&[
        "eval", "--ckpt", run.join("model.ckpt").to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", eval.to_str().unwrap(),
        "--limit", "24",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["probe_report.csv", "cooccurrence.csv", "cooccurrence.pgm", "eval_summary.txt", "run_manifest.txt"] {
        assert!(eval.join(f).exists(), "missing {f}");
    }

    // Transfer with target == source writes a reconstruction.
    let tdir = dir.path().join("transfer");
    let r = retriever(&[
        "transfer", "--ckpt", run.join("model.ckpt").to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", tdir.to_str().unwrap(),
        "--source", "0", "--target", "0",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(tdir.join("transfer_output.csv").exists());
    assert!(tdir.join("transfer_report.txt").exists());
}

#[test]
fn train_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    write(&spec, SMALL_SPEC);
    let data = dir.path().join("data");
    assert!(retriever(&["generate", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]).status.success());
    let cfg = dir.path().join("m.cfg");
    write(&cfg, SMALL_CONFIG);

    let log_of = |name: &str| {
        let run = dir.path().join(name);
        let r = retriever(&[
            "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(),
            "--out", run.to_str().unwrap(),
        ]);
        assert!(r.status.success());
        fs::read(run.join("train_log.csv")).unwrap()
    };
    assert_eq!(log_of("r1"), log_of("r2"), "same-seed logs must be byte-identical");
}

#[test]
fn checkpoint_config_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    write(&spec, SMALL_SPEC);
    let data = dir.path().join("data");
    assert!(retriever(&["generate", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]).status.success());
    let cfg = dir.path().join("m.cfg");
    write(&cfg, SMALL_CONFIG);
    let run = dir.path().join("run");
    assert!(retriever(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ])
    .status
    .success());

    // Same checkpoint, conflicting runtime config.
    let cfg2 = dir.path().join("m2.cfg");
    write(&cfg2, &SMALL_CONFIG.replace("m=4", "m=6"));
    let r = retriever(&[
        "eval", "--ckpt", run.join("model.ckpt").to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", dir.path().join("e").to_str().unwrap(),
        "--config", cfg2.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(4));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("'m'"), "stderr should name the field: {err}");

    // Truncated checkpoint is an artifact error too.
    let bytes = fs::read(run.join("model.ckpt")).unwrap();
    let broken = dir.path().join("broken.ckpt");
    fs::write(&broken, &bytes[..bytes.len() - 16]).unwrap();
    let r = retriever(&[
        "eval", "--ckpt", broken.to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", dir.path().join("e2").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(4));
}

#[test]
fn check_suites_pass_on_fresh_model() {
    for what in ["pi", "losses"] {
        let r = retriever(&["check", "--what", what]);
        assert!(
            r.status.success(),
            "{what}: {}\n{}",
            String::from_utf8_lossy(&r.stdout),
            String::from_utf8_lossy(&r.stderr)
        );
    }
    let r = retriever(&["check", "--what", "bogus"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn check_grad_passes() {
    let r = retriever(&["check", "--what", "grad"]);
    assert!(
        r.status.success(),
        "{}\n{}",
        String::from_utf8_lossy(&r.stdout),
        String::from_utf8_lossy(&r.stderr)
    );
    let out = String::from_utf8_lossy(&r.stdout);
    assert!(out.contains("max relative error"));
}

#[test]
fn resume_continues_log() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    write(&spec, SMALL_SPEC);
    let data = dir.path().join("data");
    assert!(retriever(&["generate", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]).status.success());
    let cfg = dir.path().join("m.cfg");
    write(&cfg, &SMALL_CONFIG.replace("epochs=1", "epochs=2").replace("ckpt_every=0", "ckpt_every=6"));
    let run = dir.path().join("run");
    // First half.
    assert!(retriever(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(), "--steps", "6",
    ])
    .status
    .success());
    let ckpt = run.join("ckpt_step6.ckpt");
    assert!(ckpt.exists());
    // Resume to completion.
    let r = retriever(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(), "--resume", ckpt.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, (0..12).collect::<Vec<u64>>());
}
