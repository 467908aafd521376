use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "seed = 3
model.input = 2
model.layers = dense:2:12,relu,dense:12:3
data.source = synthetic
data.kind = blobs
data.samples = 240
data.test_samples = 120
data.noise = 0.4
lottery.cycles = 2
lottery.particles = 2
lottery.rewind_steps = 5
train.epochs = 4
train.batch_size = 32
sgd.lr = 0.1
output.save_particles = true
";

fn swamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swamp")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = swamp(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("exp.cfg");
    std::fs::write(&cfg, CONFIG).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let text = ok(&["swamp", "--config", &cfg, "--out", run_s]);
    assert!(text.contains("cycle 2"), "{text}");
    for f in ["config.resolved.txt", "metrics.csv", "cycle_00.ckpt", "cycle_01.ckpt", "cycle_02.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = run.join("cycle_02.ckpt");
    let ck_s = ck.to_str().unwrap();

    let eval = ok(&["eval", "--config", &cfg, "--checkpoint", ck_s]);
    let labels: Vec<&str> = eval.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["P1", "P2", "WA"]);

    let p1 = format!("{ck_s}@p1");
    let p2 = format!("{ck_s}@p2");
    let barrier = ok(&["barrier", "--config", &cfg, "--a", &p1, "--b", &p2, "--grid", "5"]);
    assert_eq!(barrier.lines().next(), Some("lambda,loss,error"));
    assert_eq!(barrier.lines().count(), 6);

    let surf = dir.path().join("surface");
    ok(&[
        "surface", "--config", &cfg, "--w1", &p1, "--w2", &p2, "--w3", ck_s, "--resolution", "4", "--out",
        surf.to_str().unwrap(),
    ]);
    assert!(surf.join("grid.txt").exists() && surf.join("points.csv").exists());

    let trace = ok(&["hessian-trace", "--config", &cfg, "--checkpoint", ck_s, "--probes", "8", "--batch", "32", "--exact"]);
    assert!(trace.contains("hutchinson,") && trace.contains("exact,"), "{trace}");

    let ens = ok(&["ensemble-eval", "--config", &cfg, "--checkpoint", &p1, &p2]);
    assert!(ens.lines().nth(1).unwrap().starts_with("2,"), "{ens}");

    let tr = dir.path().join("transplant");
    let out = ok(&[
        "transplant-mask", "--config", &cfg, "--mask-from", ck_s, "--method", "sgd", "--out", tr.to_str().unwrap(),
    ]);
    assert!(out.starts_with("sparsity,"), "{out}");
    assert!(tr.join("cycle_02.ckpt").exists());
}

#[test]
fn overrides_and_seed_flag_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run = dir.path().join("dense");
    ok(&[
        "dense", "--config", &cfg, "--seed", "11", "--override", "train.epochs=2", "--out", run.to_str().unwrap(),
    ]);
    let resolved = std::fs::read_to_string(run.join("config.resolved.txt")).unwrap();
    assert!(resolved.contains("seed = 11"), "{resolved}");
    assert!(resolved.contains("train.epochs = 2"), "{resolved}");
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("sweep");
    let table = ok(&[
        "sweep", "--config", &cfg, "--override", "lottery.cycles=1", "--override", "train.epochs=2", "--axis",
        "particle-count", "--values", "1,2", "--seeds", "1,2", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(table.lines().count(), 3, "{table}");
}

#[test]
fn failures_exit_nonzero_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());

    let missing = swamp(&["imp", "--config", "/nonexistent.cfg", "--out", "/tmp/x"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nonexistent.cfg"));

    let bad = swamp(&["imp", "--config", &cfg, "--override", "lottery.keep_ratio=1.5", "--out", "/tmp/x"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("keep ratio"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let ev = swamp(&["eval", "--config", &cfg, "--checkpoint", junk.to_str().unwrap()]);
    assert!(!ev.status.success());
    let err = String::from_utf8_lossy(&ev.stderr);
    assert!(err.contains("junk.ckpt") && err.contains("magic"), "{err}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = swamp::experiments::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        swamp::model::Model::new(cfg.model.clone(), cfg.prunable).unwrap();
    }
}
