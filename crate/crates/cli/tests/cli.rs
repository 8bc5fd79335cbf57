use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_seedloc");

const SMALL: &str = r#"{
  "volumes": 2,
  "phantom": { "shape": [32, 32, 32], "seed_count": 3, "streak_artifact_count": 1 },
  "train_center": { "kind": "volume_center" },
  "arch": { "levels": 1, "base_channels": 2 },
  "train": { "max_rounds": 2, "map_scale": 100.0, "weight_floor": 0.1, "validation_fraction": 0.5 }
}
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(dir: &Path) {
    std::fs::write(dir.join("cfg.json"), SMALL).unwrap();
    let common = ["--config", "cfg.json", "--seed", "5", "--voi", "32,32,32", "--clamp", "-80,175", "--spacing", "0.5"];
    let with = |extra: &[&str]| -> Vec<String> {
        extra.iter().chain(common.iter()).map(|s| s.to_string()).collect()
    };
    let steps: [&[&str]; 6] = [
        &["gen-phantom", "--out", "data"],
        &["make-targets", "--dataset", "data/dataset.json", "--out", "targets"],
        &["train", "--dataset", "data/dataset.json", "--out", "model"],
        &["infer", "--model", "model/model", "--dataset", "data/dataset.json", "--out", "det", "--jobs", "2"],
        &["evaluate", "--dataset", "data/dataset.json", "--detections", "det", "--out", "eval", "--threshold-mm", "3"],
        &["report", "eval", "--out", "report"],
    ];
    for step in steps {
        let args = with(step);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(dir, &refs);
    }
}

#[test]
fn seeded_pipeline_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let fa = files(a.path());
    let fb = files(b.path());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs between runs", k.display());
    }
    for dir in ["data", "targets", "model", "det", "eval", "report"] {
        assert!(fa.contains_key(&Path::new(dir).join("run_config.json")), "{dir} lacks run_config.json");
    }
    for f in ["model/model.ckpt.json", "model/model.ckpt.bin", "model/loss.csv", "report/report.csv", "report/report.txt"] {
        assert!(fa.contains_key(Path::new(f)), "missing {f}");
    }
    let loss = String::from_utf8(fa[Path::new("model/loss.csv")].clone()).unwrap();
    assert!(loss.starts_with("round,train_loss,val_loss,lr\n"));
    assert_eq!(loss.lines().count(), 3);
}

#[test]
fn evaluate_identical_sets_gives_full_rate() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("gt.pts.json"),
        r#"{"points_mm": [[1.0, 2.0, 3.0], [10.0, 2.0, 3.0], [5.5, -4.0, 8.25]]}"#,
    )
    .unwrap();
    let stdout = ok(d.path(), &["evaluate", "--gt", "gt.pts.json", "--det", "gt.pts.json", "--out", "ev"]);
    assert!(stdout.contains("3/3"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("ev/gt.eval.json")).unwrap()).unwrap();
    assert_eq!(report["detection_rate"], 1.0);
    let pairs = std::fs::read_to_string(d.path().join("ev/gt.pairs.csv")).unwrap();
    assert_eq!(pairs.lines().next(), Some("gt_index,det_index,distance_mm,detected"));
    assert_eq!(pairs.lines().count(), 4);
}

#[test]
fn train_without_volumes_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("dataset.json"), "[]\n").unwrap();
    let out = run(d.path(), &["train", "--dataset", "dataset.json", "--out", "m"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no training volumes"));
}

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(d.path(), &["gen-phantom", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(d.path(), &["gen-phantom", "--voi", "1,2"]).status.code(), Some(1));
    assert_eq!(run(d.path(), &[]).status.code(), Some(1));
    assert_eq!(run(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["infer", "--model", "nothing", "nothing.vol.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let stdout = ok(d.path(), &["gradcheck", "--out", "gc"]);
    assert!(stdout.contains("network: max relative error"));
    assert!(d.path().join("gc/gradcheck.json").exists());
}

#[test]
fn flags_override_config_file() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("cfg.json"), SMALL).unwrap();
    ok(d.path(), &["gen-phantom", "--config", "cfg.json", "--count", "1", "--seed", "9", "--clamp", "-100,200", "--out", "o"]);
    let rc: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("o/run_config.json")).unwrap()).unwrap();
    assert_eq!(rc["command"], "gen-phantom");
    assert_eq!(rc["config"]["seed"], 9);
    assert_eq!(rc["config"]["volumes"], 1);
    assert_eq!(rc["config"]["phantom"]["rng_seed"], 9);
    assert_eq!(rc["config"]["prep"]["clamp_hu"], serde_json::json!([-100.0, 200.0]));
    assert_eq!(rc["config"]["phantom"]["shape"], serde_json::json!([32, 32, 32]));
}
