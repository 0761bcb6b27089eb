use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
[data]
train = 4
val = 2
test = 3
num_frames = 24
image_size = 32
phantom_size = 64
sweeps_per_subject = 2
linear_length_mm = [6.0, 10.0]
c_shape_length_mm = [4.0, 8.0]
s_shape_length_mm = [4.0, 5.0]
[model]
image_size = 32
[model.local]
channels = [4, 4, 6, 8]
pooled_dim = 8
pool_heads = 2
[model.global]
resolution = 16
channels = [4, 8]
feature_dim = 8
temporal = { hidden = 8, intermediate = 16, layers = 1, heads = 2 }
[model.fusion]
stride = 2
interposer = { hidden = 8, intermediate = 8, layers = 1, heads = 2 }
decoder = { hidden = 8, intermediate = 16, layers = 1, heads = 2 }
[model.coupled]
hidden = 8
intermediate = 16
layers = 1
heads = 2
[train]
window = 8
global_count = 8
local_cnn = { epochs = 2, lr = 1e-3, weight_decay = 1e-3 }
local_pool = { epochs = 2, lr = 1e-3, weight_decay = 0.0 }
global = { epochs = 2, lr = 1e-3, weight_decay = 0.0 }
fusion = { epochs = 2, lr = 5e-4, weight_decay = 0.0 }
coupled = { epochs = 2, lr = 5e-4, weight_decay = 0.0 }
"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualtrack")).current_dir(dir).arg("--quiet").args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = bin(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Failing invocation: returns the category from the single stderr line.
fn fails(dir: &Path, args: &[&str]) -> (String, String) {
    let o = bin(dir, args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(o.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    let rest = lines[0].strip_prefix("error: ").expect("error prefix");
    let (cat, msg) = rest.split_once(": ").unwrap();
    assert!(cat.chars().all(|c| c.is_ascii_lowercase() || c == '-'), "{cat}");
    (cat.to_string(), msg.to_string())
}

fn setup() -> TempDir {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("tiny.toml"), TINY).unwrap();
    ok(d.path(), &["--config", "tiny.toml", "generate", "--out", "data"]);
    d
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn usage_errors_are_one_line() {
    let d = TempDir::new().unwrap();
    let (cat, _) = fails(d.path(), &["frobnicate"]);
    assert_eq!(cat, "usage");
    let (cat, _) = fails(d.path(), &["train", "--stage", "fusion"]);
    assert_eq!(cat, "usage");
    let o = bin(d.path(), &["--help"]);
    assert!(o.status.success());
    let help = String::from_utf8(o.stdout).unwrap();
    for sub in ["generate", "train", "evaluate", "reconstruct", "compound", "ablate"] {
        assert!(help.contains(sub), "{sub}");
    }
    for flag in ["--config", "--seed", "--deterministic", "--out", "--force"] {
        assert!(help.contains(flag), "{flag}");
    }
}

#[test]
fn config_and_argument_errors() {
    let d = TempDir::new().unwrap();
    std::fs::write(d.path().join("bad.toml"), "[train]\nwindow = 0\n").unwrap();
    assert_eq!(fails(d.path(), &["--config", "bad.toml", "generate"]).0, "config");
    assert_eq!(fails(d.path(), &["--config", "missing.toml", "generate"]).0, "io");
    std::fs::write(d.path().join("tiny.toml"), TINY).unwrap();
    ok(d.path(), &["--config", "tiny.toml", "generate", "--out", "data"]);
    assert_eq!(fails(d.path(), &["--config", "tiny.toml", "train", "--data", "data", "--stage", "warp"]).0, "invalid-argument");
    assert_eq!(fails(d.path(), &["evaluate", "--data", "data", "--baseline", "oracle"]).0, "invalid-argument");
    assert_eq!(fails(d.path(), &["evaluate", "--data", "nowhere", "--baseline", "zero"]).0, "io");
}

#[test]
fn generate_is_deterministic_and_refuses_overwrite() {
    let d = setup();
    let p = d.path();
    ok(p, &["--config", "tiny.toml", "generate", "--out", "again"]);
    let index = read(&p.join("data/index.json"));
    assert_eq!(index, read(&p.join("again/index.json")));
    let ids: serde_json::Value = serde_json::from_slice(&index).unwrap();
    assert_eq!(ids["train"].as_array().unwrap().len(), 4);
    for id in ["train-0000", "val-0001", "test-0002"] {
        for f in ["frames.bin", "poses.csv", "meta.json"] {
            assert_eq!(read(&p.join("data").join(id).join(f)), read(&p.join("again").join(id).join(f)));
        }
    }
    let (cat, msg) = fails(p, &["--config", "tiny.toml", "generate", "--out", "data"]);
    assert_eq!(cat, "refused");
    assert!(msg.contains("--force"));
    ok(p, &["--config", "tiny.toml", "--seed", "99", "--force", "generate", "--out", "data"]);
    assert_ne!(read(&p.join("data/train-0000/frames.bin")), read(&p.join("again/train-0000/frames.bin")));
}

#[test]
fn baselines_through_evaluate() {
    let d = setup();
    let p = d.path();
    let text = ok(p, &["evaluate", "--data", "data", "--baseline", "ground-truth", "--out", "gt"]);
    assert!(text.contains("ground-truth"));
    let csv = String::from_utf8(read(&p.join("gt/summary.csv"))).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert!(row.iter().all(|v| v.abs() < 1e-6), "{row:?}");

    ok(p, &["evaluate", "--data", "data", "--baseline", "zero", "--out", "zero"]);
    let index: serde_json::Value = serde_json::from_slice(&read(&p.join("data/index.json"))).unwrap();
    let mut means = [0.0; 4];
    let test = index["test"].as_array().unwrap();
    for id in test {
        let r: serde_json::Value = serde_json::from_slice(&read(&p.join("zero").join(format!("{}.json", id.as_str().unwrap())))).unwrap();
        let m = &r["metrics"];
        assert!((m["fdr_percent"].as_f64().unwrap() - 100.0).abs() < 1e-9);
        for (k, key) in ["gpe_mm", "lpe_um", "fdr_percent", "max_drift_mm"].iter().enumerate() {
            means[k] += m[key].as_f64().unwrap() / test.len() as f64;
        }
    }
    let csv = String::from_utf8(read(&p.join("zero/summary.csv"))).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    for k in 0..4 {
        assert!((row[k] - means[k]).abs() < 1e-9);
    }
    assert!(read(&p.join("zero/summary.txt")).len() > 50);
    assert_eq!(fails(p, &["evaluate", "--data", "data", "--baseline", "zero", "--out", "zero"]).0, "refused");
}

fn train(stage: &str) -> Vec<&str> {
    vec!["--config", "tiny.toml", "train", "--data", "data", "--stage", stage, "--out", "run"]
}

#[test]
fn pipeline_end_to_end() {
    let d = setup();
    let p = d.path();
    let (cat, msg) = fails(p, &train("fusion"));
    assert_eq!(cat, "missing-prerequisite");
    assert!(msg.contains("local_pool"), "{msg}");

    for s in ["local_cnn", "local_pool", "global", "fusion"] {
        ok(p, &train(s));
    }
    assert!(p.join("run/fusion.best.ckpt").exists());
    assert!(String::from_utf8(read(&p.join("run/train_log.csv"))).unwrap().lines().count() > 8);
    assert_eq!(fails(p, &train("fusion")).0, "refused");
    let mut resume = train("fusion");
    resume.push("--resume");
    ok(p, &resume);

    ok(p, &["evaluate", "--data", "data", "--run", "run", "--variant", "dualtrack", "--out", "ev1"]);
    ok(p, &["evaluate", "--data", "data", "--run", "run", "--variant", "dualtrack", "--out", "ev2", "--deterministic"]);
    assert_eq!(read(&p.join("ev1/summary.csv")), read(&p.join("ev2/summary.csv")));
    assert!(String::from_utf8(read(&p.join("ev1/summary.txt"))).unwrap().contains("dualtrack"));
    assert_eq!(fails(p, &["evaluate", "--data", "data", "--run", "run", "--variant", "coupled", "--out", "ev3"]).0, "missing-prerequisite");

    ok(p, &["reconstruct", "--data", "data", "--sweep", "test-0000", "--run", "run", "--variants", "local_only,dualtrack", "--out", "rec"]);
    for f in ["dualtrack.estimate.json", "local_only.estimate.json", "trajectory.svg", "out_of_plane.svg", "out_of_plane.csv"] {
        assert!(read(&p.join("rec").join(f)).len() > 100, "{f}");
    }
    assert!(String::from_utf8(read(&p.join("rec/trajectory.svg"))).unwrap().starts_with("<svg"));
    let est: serde_json::Value = serde_json::from_slice(&read(&p.join("rec/dualtrack.estimate.json"))).unwrap();
    assert_eq!(est["composed"].as_array().unwrap().len(), 24);
    assert_eq!(est["relparams"].as_array().unwrap().len(), 23);
    assert_eq!(est["model"].as_str().unwrap().len(), 64);

    ok(p, &["compound", "--data", "data", "--sweep", "test-0000", "--estimate", "rec/dualtrack.estimate.json", "--out", "vol"]);
    ok(p, &["compound", "--data", "data", "--sweep", "test-0000", "--estimate", "rec/dualtrack.estimate.json", "--out", "vol2"]);
    assert_eq!(read(&p.join("vol/volume.bin")), read(&p.join("vol2/volume.bin")));
    let meta: serde_json::Value = serde_json::from_slice(&read(&p.join("vol/volume.json"))).unwrap();
    let n: u64 = meta["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).product();
    assert_eq!(read(&p.join("vol/volume.bin")).len() as u64, n * 4);

    let text = ok(p, &["--config", "tiny.toml", "ablate", "--data", "data", "--out", "run"]);
    for v in ["zero", "local_only", "coupled", "dualtrack"] {
        assert!(text.lines().any(|l| l.starts_with(v)), "{v}: {text}");
    }
    assert!(p.join("run/coupled.best.ckpt").exists());
    assert!(p.join("run/ablation/summary.csv").exists());
}
