use std::path::PathBuf;

use repose::harness::benchmark::{run_benchmark, BenchmarkOptions};
use repose::harness::scenario::{generate_trial, SceneAssets, ScenarioConfig, TextureSource};
use repose::mesh::{load_mesh, mesh_stats, parse_obj, to_obj};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn fixtures_load_and_validate() {
    for name in ["easy.json", "corrupted.json", "rgb.json", "train_one.json"] {
        let cfg = ScenarioConfig::load(fixture(name)).unwrap();
        assert!(cfg.n_trials >= 1, "{name}");
        SceneAssets::prepare(&cfg, None).unwrap();
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let text = std::fs::read_to_string(fixture("corrupted.json")).unwrap();
    assert!(ScenarioConfig::from_json(&text).is_ok());
    for (from, to) in [("\"noise_sigma\"", "\"noise\""), ("\"n_trials\"", "\"trials\""), ("\"gamma\"", "\"gama\"")] {
        let bad = text.replacen(from, to, 1);
        assert!(ScenarioConfig::from_json(&bad).is_err(), "{to} accepted");
    }
}

#[test]
fn trials_are_reproducible() {
    let cfg = ScenarioConfig::load(fixture("corrupted.json")).unwrap();
    let assets = SceneAssets::prepare(&cfg, None).unwrap();
    for i in [0, 7, 199] {
        let a = generate_trial(&cfg, &assets, i).unwrap();
        let b = generate_trial(&cfg, &assets, i).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.initial, b.initial);
        assert_eq!(a.input.data(), b.input.data());
    }
    let a = generate_trial(&cfg, &assets, 0).unwrap();
    let b = generate_trial(&cfg, &assets, 1).unwrap();
    assert_ne!(a.truth, b.truth);
}

#[test]
fn fixture_mesh_roundtrips_through_obj() {
    let mesh = load_mesh(fixture("blob.obj"), 3).unwrap();
    let again = parse_obj(&to_obj(&mesh), 3, &fixture("blob.obj")).unwrap();
    assert_eq!(mesh.faces(), again.faces());
    assert_eq!(mesh.colors(), again.colors());
    let (a, b) = (mesh_stats(&mesh).unwrap(), mesh_stats(&again).unwrap());
    assert!((a.diameter - b.diameter).abs() < 1e-9);
}

#[test]
fn rgb_baseline_does_not_beat_oracle_features() {
    let mut rgb = ScenarioConfig::load(fixture("rgb.json")).unwrap();
    rgb.n_trials = 60;
    let mut oracle = rgb.clone();
    oracle.texture_source = TextureSource::Oracle;
    let opts = BenchmarkOptions::default();
    let r = run_benchmark(&rgb, None, &opts).unwrap();
    let o = run_benchmark(&oracle, None, &opts).unwrap();
    assert!(
        r.summary.acc_at_0p1d_after <= o.summary.acc_at_0p1d_after,
        "rgb {} oracle {}",
        r.summary.acc_at_0p1d_after,
        o.summary.acc_at_0p1d_after
    );
}

#[test]
fn near_total_occlusion_is_flagged_not_fatal() {
    let mut cfg = ScenarioConfig::load(fixture("corrupted.json")).unwrap();
    cfg.n_trials = 20;
    cfg.corruption.occlusion_frac = 0.99;
    let r = run_benchmark(&cfg, None, &BenchmarkOptions::default()).unwrap();
    assert_eq!(r.trials.len(), 20);
    assert!(r.summary.heavy_occlusion_trials > 0);
    for t in &r.trials {
        assert!(t.after.add.is_finite());
    }
}

#[test]
fn curve_starts_at_initial_error() {
    let mut cfg = ScenarioConfig::load(fixture("easy.json")).unwrap();
    cfg.n_trials = 10;
    let r = run_benchmark(&cfg, None, &BenchmarkOptions::default()).unwrap();
    assert_eq!(r.curve.len(), r.iterations + 1);
    assert_eq!(r.curve[0].acc_at_0p1d, r.summary.acc_at_0p1d_before);
    assert_eq!(r.curve[r.iterations].acc_at_0p1d, r.summary.acc_at_0p1d_after);
    for t in &r.trials {
        assert_eq!(t.add_curve[0], t.before.add_or_adds());
    }
}
