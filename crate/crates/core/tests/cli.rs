use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use repose::mesh::{init_textures, load_mesh, TextureInit};
use repose::optimizer::LMParams;
use repose::training::Checkpoint;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn repose(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repose"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn repose")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn stderr_error(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).expect("json on stderr");
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(repose(&[], dir.path()).status.code(), Some(2));
    assert_eq!(repose(&["fly"], dir.path()).status.code(), Some(2));
    assert_eq!(repose(&["refine", "--jobs", "many"], dir.path()).status.code(), Some(2));
    assert_eq!(repose(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = repose(&["refine", "--config", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out), "io");

    let text = std::fs::read_to_string(fixture("easy.json")).unwrap();
    let bad = text.replacen("\"seed\"", "\"sead\"", 1);
    std::fs::write(dir.path().join("bad.json"), bad).unwrap();
    let out = repose(&["validate", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out), "config");
}

#[test]
fn check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = repose(&["check"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
}

#[test]
fn validate_reports_fixture_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("easy.json");
    let v = stdout_json(&repose(&["validate", "--config", cfg.to_str().unwrap()], dir.path()));
    assert_eq!(v["vertices"], 266);
    assert_eq!(v["faces"], 528);
    assert!(v["issues"].as_array().unwrap().is_empty());
}

#[test]
fn refine_from_exact_pose_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("train_one.json"))
        .unwrap()
        .replace("\"rot_deg_median\": 1.28, \"trans_rel_median\": 0.048", "\"rot_deg_median\": 0.0, \"trans_rel_median\": 0.0");
    let cfg = dir.path().join("exact.json");
    std::fs::write(&cfg, text).unwrap();
    std::fs::copy(fixture("blob.obj"), dir.path().join("blob.obj")).unwrap();
    let v = stdout_json(&repose(&["refine", "--config", "exact.json"], dir.path()));
    let d = v["diameter"].as_f64().unwrap();
    assert_eq!(v["add_before"].as_f64().unwrap(), 0.0);
    assert!(v["add_after"].as_f64().unwrap() < 1e-6 * d, "{v}");
}

#[test]
fn trained_checkpoint_beats_random_textures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("train_one.json");
    let cfg = cfg.to_str().unwrap();

    let train = stdout_json(&repose(&["train", "--config", cfg, "--checkpoint", "trained.json"], dir.path()));
    assert_eq!(train["epochs"], 200);
    let first = train["first"]["diff"].as_f64().unwrap();
    let last = train["last"]["diff"].as_f64().unwrap();
    assert!(last < 0.01 * first, "{train}");
    assert!(dir.path().join("trained.rptx").exists());

    let geometry = load_mesh(fixture("blob.obj"), 3).unwrap();
    let random = init_textures(&geometry, TextureInit::UniformRandom { lo: -0.1, hi: 0.1, seed: 0 }, 3).unwrap();
    let params = LMParams::new(vec![3e5, 3e4, 3e3, 300.0, 30.0], 1.0, 5).unwrap();
    Checkpoint { mesh: random, params, epoch: 0, history: Vec::new() }
        .save(dir.path().join("random.json"))
        .unwrap();

    let trained = stdout_json(&repose(&["refine", "--config", cfg, "--checkpoint", "trained.json"], dir.path()));
    let baseline = stdout_json(&repose(&["refine", "--config", cfg, "--checkpoint", "random.json"], dir.path()));
    let d = trained["diameter"].as_f64().unwrap();
    let (a, b) = (trained["add_after"].as_f64().unwrap(), baseline["add_after"].as_f64().unwrap());
    assert!(a < b, "trained {a} vs random {b}");
    assert!(a < 0.005 * d, "trained {a}");
}

#[test]
fn benchmark_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = repose(&["benchmark", "--out", "bench", "--seed", "4", "--jobs", "2"], dir.path());
    let v = stdout_json(&out);
    assert!(v["summary"]["acc_at_0p1d_after"].as_f64().is_some());
    let bench = dir.path().join("bench");
    for f in ["report.json", "trials.csv", "curve.csv", "timing.json"] {
        assert!(bench.join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(bench.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 4);
    assert!(report.get("timing").is_none());
    let trials = std::fs::read_to_string(bench.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 21);
}

#[test]
fn render_dumps_images() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&repose(&["render", "--out", "img", "--trial", "2"], dir.path()));
    assert!(v["truth_pixels"].as_u64().unwrap() > 0);
    let files: Vec<_> = std::fs::read_dir(dir.path().join("img/truth")).unwrap().collect();
    assert!(!files.is_empty());
}
