use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
# small synthetic problem
dataset = synthetic
model = fc:16-64-4
timesteps = 4
lr = 1e-2
batch_size = 32
epochs = 4
min_prunable = 300
eta4 = 1e6
";

fn snnmx(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    if !cfg.exists() {
        fs::write(&cfg, CONFIG).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_snnmx"))
        .args(args)
        .arg(format!("--config={}", cfg.display()))
        .arg(format!("--out={}", dir.join("out").display()))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field(report: &str, name: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(name))
        .unwrap_or_else(|| panic!("no `{name}` in\n{report}"))
        .trim()
        .to_string()
}

#[test]
fn train_compress_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&snnmx(dir.path(), &["train"]));
    assert!(out.join("baseline.ckpt").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5, "{metrics}");
    assert!(metrics.starts_with("epoch,phase,loss,acc,s,y,z,resource,counted_sparsity"));

    let base = ok(&snnmx(dir.path(), &["eval", out.join("baseline.ckpt").to_str().unwrap()]));
    assert_eq!(field(&base, "accuracy"), field(&base, "saved acc"));
    assert_eq!(field(&base, "sparsity"), "0");
    assert!(field(&base, "accuracy").parse::<f64>().unwrap() > 0.95);

    ok(&snnmx(dir.path(), &["compress", "--budgets=0.5,0.2", "--epochs=6"]));
    for f in ["budget_0.5.ckpt", "budget_0.2.ckpt", "final.ckpt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = ok(&snnmx(dir.path(), &["eval", out.join("budget_0.2.ckpt").to_str().unwrap()]));
    assert_eq!(field(&report, "accuracy"), field(&report, "saved acc"));
    assert_eq!(field(&report, "budget"), "0.2");
    let sparsity: f64 = field(&report, "sparsity").parse().unwrap();
    assert!(sparsity >= 0.8 - 1.0 / 1024.0, "{report}");

    // per-layer rows add up to the total row
    let rows: Vec<Vec<String>> = report
        .lines()
        .skip_while(|l| !l.trim_start().starts_with("layer"))
        .skip(1)
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    let (layers, total) = rows.split_at(rows.len() - 1);
    let sum = |col: usize| layers.iter().map(|r| r[col].parse::<usize>().unwrap()).sum::<usize>();
    assert_eq!(sum(2).to_string(), total[0][1]);
    assert_eq!(sum(3).to_string(), total[0][2]);

    let msg = ok(&snnmx(dir.path(), &["export-metrics"]));
    assert!(msg.contains("3 rows"), "{msg}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let budgets: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(budgets, ["1", "0.5", "0.2"]);
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&snnmx(a.path(), &["train", "--seed", "9", "--epochs=2"]));
    ok(&snnmx(b.path(), &["train", "--seed", "9", "--epochs=2"]));
    let read = |d: &Path| fs::read(d.join("out/metrics.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let c = tempfile::tempdir().unwrap();
    ok(&snnmx(c.path(), &["train", "--seed", "10", "--epochs=2"]));
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn empty_budget_compress_matches_train() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&snnmx(a.path(), &["train", "--epochs=2"]));
    ok(&snnmx(b.path(), &["compress", "--init=scratch", "--epochs=2"]));
    let read = |d: &Path, f: &str| fs::read(d.join("out").join(f)).unwrap();
    assert_eq!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));
    assert_eq!(read(a.path(), "baseline.ckpt"), read(b.path(), "final.ckpt"));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--no_such_key=3"][..],
        &["train", "--budgets=0.1,0.5"],
        &["train", "--timesteps=0"],
        &["train", "--model=fc:10-4"],
        &["frobnicate"],
        // no baseline checkpoint in the output directory yet
        &["compress", "--budgets=0.5"],
    ] {
        let out = snnmx(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = Command::new(env!("CARGO_BIN_EXE_snnmx"))
        .args(["train", "--config", "/nonexistent/run.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    ok(&snnmx(dir.path(), &["train", "--epochs=1"]));
    let ck = dir.path().join("out/baseline.ckpt");
    // a dataset whose samples do not fit the checkpoint's input layer
    let out = snnmx(
        dir.path(),
        &["eval", ck.to_str().unwrap(), "--synthetic_features=8", "--model=fc:8-4"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(&ck, b"SNNMXCKP garbage").unwrap();
    let out = snnmx(dir.path(), &["eval", ck.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let out = Command::new(env!("CARGO_BIN_EXE_snnmx")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["train", "compress", "eval", "export-metrics"] {
        assert!(text.contains(cmd), "{text}");
    }
}
