use std::path::Path;
use std::process::{Command, Output};

fn karma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_karma")).args(args).env_remove("TIKAN_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace().find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('='))).unwrap_or_else(|| panic!("no {} in {}", key, line))
}

fn synth(dir: &Path) {
    let o = karma(&["synth", "--out", dir.to_str().unwrap(), "--count", "6", "--height", "32", "--width", "32", "--classes", "3", "--cell", "4", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn audit_prints_breakdown_and_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("audit.txt");
    let o = karma(&["audit", "--variant", "karma", "--res", "256", "--out", f.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("module=backbone.stem")));
    let totals = text.lines().find(|l| l.starts_with("params=")).unwrap();
    let p: f64 = field(totals, "params").parse().unwrap();
    assert!((p - 0.959e6).abs() < 0.1 * 0.959e6);
    assert_eq!(std::fs::read_to_string(f).unwrap(), text);
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let o = karma(&["audit", "--resolution", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert_eq!(e.lines().count(), 1);
    assert!(e.starts_with("event=error kind=usage"));
    assert!(e.contains("--res"));

    let o = karma(&["audit", "--set", "model.rank_f=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.rank_spline"));

    let o = karma(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let o = karma(&["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("train"));
}

#[test]
fn missing_dataset_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let o = karma(&["train", "--data", dir.path().join("nope").to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("event=error kind=format"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn class_count_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let o = karma(&["train", "--data", data.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap(), "--set", "model.classes=5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset has 3 classes"));
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    synth(&data);
    let cfg = dir.path().join("run.ini");
    std::fs::write(&cfg, "[model]\nvariant = flash\n[train]\nbatch_size = 3\nprune_every = 1\n").unwrap();
    let o = karma(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--epochs", "2", "--seed", "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let epochs: Vec<&str> = out.lines().filter(|l| l.starts_with("event=epoch")).collect();
    assert_eq!(epochs.len(), 2);
    for l in &epochs {
        assert!(field(l, "loss").parse::<f64>().unwrap().is_finite());
    }
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().collect::<Vec<_>>(), epochs);
    assert!(run.join("best/manifest.txt").exists() && run.join("final/manifest.txt").exists());

    let best = run.join("best");
    let eval = |threads: &str, split: &str| {
        let o = karma(&["eval", "--checkpoint", best.to_str().unwrap(), "--data", data.to_str().unwrap(), "--threads", threads, "--split", split]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let single = eval("1", "all");
    assert!(single.starts_with("event=metrics miou="));
    // sharded evaluation merges to the same confusion matrix
    assert_eq!(eval("3", "all"), single);
    // best checkpoint reproduces the validation score logged during training
    let best_line = epochs.iter().find(|l| field(l, "best") == "true").map(|l| *l).unwrap_or(epochs[0]);
    let logged: f64 = field(best_line, "val_miou").parse().unwrap();
    let val = eval("1", "val");
    let scored: f64 = field(&val, "miou").parse().unwrap();
    assert!((logged - scored).abs() < 5e-7, "{} vs {}", logged, scored);
}

#[test]
fn training_is_reproducible_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let run = |name: &str| {
        let o = karma(&["train", "--data", data.to_str().unwrap(), "--out", dir.path().join(name).to_str().unwrap(), "--variant", "flash", "--epochs", "2", "--batch-size", "3", "--seed", "8"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(dir.path().join(name).join("train.log")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn gradcheck_spline_suite_passes() {
    let o = karma(&["gradcheck", "--module", "spline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("failed=0"));
    let o = karma(&["gradcheck", "--module", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}
