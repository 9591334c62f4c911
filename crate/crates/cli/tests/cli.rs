use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[data]
classes = 2
per_class = 4

[gate]
d_model = 8
heads = 2
ff_width = 16
encoder_layers = 1
decoder_layers = 1
imitation_epochs = 1

[experts]
ids = face_mlp,walk_rnn
hidden = 8
epochs = 1
batch_size = 4

[trainer]
epochs = 1
batch_size = 4
walks_train = 2
walks_infer = 2

[agent]
batch_size = 4
hidden = 8
";

fn mme(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mme"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn mme")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = mme(out, args);
    assert!(
        o.status.success(),
        "mme {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("small.ini");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();

    ok(out, &["--config", cfg, "gen-data"]);
    assert!(out.join("data").is_dir());
    ok(out, &["--config", cfg, "pretrain-experts"]);
    assert!(out.join("experts.ckpt").exists());
    ok(out, &["--config", cfg, "pretrain-gate"]);
    assert!(out.join("gate_init.ckpt").exists());
    ok(out, &["--config", cfg, "train"]);
    for f in ["model.ckpt", "model.ini", "agent.ckpt", "train_log.csv", "lambda.csv", "manifest-train.ini"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    // The sidecar restores the small gate, so eval needs no config.
    ok(out, &["eval"]);
    ok(out, &["eval", "--ensemble"]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 3, "{metrics}");
    assert!(lines[2].contains("ensemble"), "{metrics}");

    let trace = ok(out, &["plot-lambda"]);
    assert!(trace.starts_with("step,epoch,iteration,lambda"));
    assert!(trace.lines().count() > 1);

    let manifest = fs::read_to_string(out.join("manifest-eval.ini")).unwrap();
    assert!(manifest.contains("[inputs]") && manifest.contains("model.ckpt"), "{manifest}");
}

#[test]
fn static_lambda_skips_the_agent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("small.ini");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(out, &["--config", cfg, "gen-data"]);
    ok(out, &["--config", cfg, "--experts", "oracle:0,oracle:1", "train", "--static-lambda", "0"]);
    assert!(out.join("model.ckpt").exists());
    assert!(!out.join("agent.ckpt").exists());
}

#[test]
fn dump_walks_prints_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-data", "--classes", "2", "--per-class", "4"]);
    let text = ok(out, &["dump-walks", "--count", "2"]);
    assert!(!text.trim().is_empty());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["gradcheck"]);
    assert!(text.contains(" 0 failed"), "{text}");
}

#[test]
fn bad_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(!mme(out, &["train", "--no-such-flag"]).status.success());
    let o = mme(out, &["eval", "--checkpoint", "nope.ckpt"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing checkpoint"));
    let bad = out.join("bad.ini");
    fs::write(&bad, "[trainer]\nepochs = many\n").unwrap();
    assert!(!mme(out, &["--config", bad.to_str().unwrap(), "gen-data"]).status.success());
    fs::write(&bad, "[trainer]\nwidth = 3\n").unwrap();
    assert!(!mme(out, &["--config", bad.to_str().unwrap(), "gen-data"]).status.success());
}
