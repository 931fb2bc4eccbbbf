use std::path::Path;
use std::process::{Command, Output};

use gamreid::tensor::{write_tensor_file, Tensor};

fn gamreid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gamreid")).args(args).output().expect("spawn gamreid")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status, stdout(o), stderr(o));
}

/// One `error[category]: ...` line on stderr.
fn assert_error(o: &Output, code: i32, category: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error[{category}]: ")), "{err}");
}

const SMALL_RUN: &str = "\
synth.identities = 4
synth.views = 12
synth.split = shared
train.batch_size = 8
train.epochs_per_stage = 1
train.stages = 2
";

#[test]
fn help_lists_commands_and_config_keys() {
    let o = gamreid(&["--help"]);
    assert_ok(&o);
    let text = stdout(&o);
    for cmd in ["synth-data", "train", "eval", "count-params", "cluster", "grad-check", "export-attn"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
    for key in ["train.lr_init", "merge.lambda", "synth.identities", "model.groups"] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn count_params_reports_reduction() {
    let o = gamreid(&["count-params", "--preset", "resnet50-gam", "--groups", "4", "--assemble"]);
    assert_ok(&o);
    let text = stdout(&o);
    let pct: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("reduction "))
        .and_then(|v| v.trim_end_matches('%').parse().ok())
        .expect("reduction line");
    assert!((pct - 59.6).abs() <= 3.0, "{pct}");
    assert!(text.contains("matches"));
}

#[test]
fn grad_check_exits_zero() {
    let o = gamreid(&["grad-check", "--module", "attention"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn usage_errors_exit_two() {
    assert_error(&gamreid(&["frobnicate"]), 2, "usage");
    assert_error(&gamreid(&["count-params"]), 2, "usage");
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("out");
    assert_error(&gamreid(&["train", "--data", arg(&missing), "--out", arg(&out)]), 2, "usage");
    assert!(!out.exists());
    assert_error(&gamreid(&["grad-check", "--module", "everything"]), 2, "usage");
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "train.learning_speed = 3\n").unwrap();
    let o = gamreid(&["synth-data", "--spec", arg(&cfg), "--out", arg(&dir.path().join("d"))]);
    assert_error(&o, 1, "config");
    assert!(stderr(&o).contains("train.learning_speed"));
    let o = gamreid(&["count-params", "--preset", "resnet51"]);
    assert_error(&o, 1, "config");
}

#[test]
fn cluster_command_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let emb = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.99, 0.141, 0.0, 1.0, 0.141, 0.99]).unwrap();
    let path = dir.path().join("emb.gamt");
    write_tensor_file(&path, &emb).unwrap();
    let out = dir.path().join("c");
    let o = gamreid(&[
        "cluster", "--embeddings", arg(&path), "--lambda", "0", "--fraction", "0.5", "--stages", "1", "--out", arg(&out),
    ]);
    assert_ok(&o);
    let assignment = std::fs::read_to_string(out.join("assignment.tsv")).unwrap();
    assert_eq!(assignment.lines().count(), 4);
    assert_eq!(std::fs::read_to_string(out.join("trajectory.tsv")).unwrap(), "1\t2\n");

    let o = gamreid(&["cluster", "--embeddings", arg(&path), "--lambda", "many", "--out", arg(&out)]);
    assert_error(&o, 1, "config");
}

#[test]
fn train_eval_and_export_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    let data = dir.path().join("data");
    assert_ok(&gamreid(&["synth-data", "--spec", arg(&cfg), "--out", arg(&data)]));
    // a second generation into the same directory is refused
    assert_error(&gamreid(&["synth-data", "--spec", arg(&cfg), "--out", arg(&data)]), 2, "usage");

    let run = dir.path().join("run");
    let o = gamreid(&["train", "--config", arg(&cfg), "--data", arg(&data), "--out", arg(&run)]);
    assert_ok(&o);
    for f in ["config.txt", "train_log.tsv", "stages.tsv", "clusters.tsv", "metrics.kv", "metrics.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let ckpt = run.join("checkpoints").join("latest.ckpt");
    assert!(ckpt.is_file());
    assert!(run.join("checkpoints").join("stage002.ckpt").is_file());
    assert_eq!(std::fs::read_to_string(run.join("train_log.tsv")).unwrap().lines().count(), 2);
    // the echoed config is fully resolved
    let echoed = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.contains("train.momentum = 0.9"), "{echoed}");

    let ev = dir.path().join("eval");
    let o = gamreid(&["eval", "--checkpoint", arg(&ckpt), "--data", arg(&data), "--out", arg(&ev)]);
    assert_ok(&o);
    assert_eq!(
        std::fs::read(ev.join("metrics.kv")).unwrap(),
        std::fs::read(run.join("metrics.kv")).unwrap(),
        "eval of the final checkpoint should reproduce the training metrics"
    );

    let image = std::fs::read_dir(data.join("query")).unwrap().next().unwrap().unwrap().path();
    let attn = dir.path().join("attn");
    let o = gamreid(&[
        "export-attn", "--checkpoint", arg(&ckpt), "--image", arg(&image), "--layer", "0", "--out", arg(&attn),
    ]);
    assert_ok(&o);
    let pgm = std::fs::read(attn.join("attention_layer0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
    let o = gamreid(&[
        "export-attn", "--checkpoint", arg(&ckpt), "--image", arg(&image), "--layer", "99", "--out", arg(&attn),
    ]);
    assert_error(&o, 2, "usage");

    // resuming with a different architecture is an integrity error
    let other = dir.path().join("other.txt");
    std::fs::write(&other, format!("{SMALL_RUN}model.groups = 2\n")).unwrap();
    let o = gamreid(&[
        "train", "--config", arg(&other), "--data", arg(&data), "--out", arg(&dir.path().join("r2")), "--resume",
        arg(&ckpt),
    ]);
    assert_error(&o, 1, "integrity");
}
