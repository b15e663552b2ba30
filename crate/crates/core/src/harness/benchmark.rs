//! Monte Carlo benchmark: generate trials, refine, score every iteration
//! count and write the report files.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{add_accuracy, add_or_adds, auc_add, percentile, summarize, PoseErrorSummary};
use crate::optimizer::{refine_with, RefineOptions};

use super::scenario::{generate_trial, SceneAssets, ScenarioConfig};

/// Accuracy threshold as a fraction of the diameter.
pub const ACCURACY_FRACTION: f64 = 0.1;
/// Tight convergence threshold as a fraction of the diameter.
pub const TIGHT_FRACTION: f64 = 0.005;
/// AUC integration limit as a fraction of the diameter.
pub const AUC_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Default)]
pub struct BenchmarkOptions {
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    pub iterations: Option<usize>,
    pub refine: RefineOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub trial: usize,
    pub before: PoseErrorSummary,
    pub after: PoseErrorSummary,
    /// ADD(-S) after each iteration count `0..=t`.
    pub add_curve: Vec<f64>,
    pub converged: bool,
    pub empty_overlap: bool,
    pub heavy_occlusion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_add: f64,
    pub median_add: f64,
    pub acc_at_0p1d: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub acc_at_0p1d_before: f64,
    pub acc_at_0p1d_after: f64,
    pub auc_before: f64,
    pub auc_after: f64,
    /// Percentage of trials ending with ADD(-S) below 0.5% of the diameter.
    pub tight_after: f64,
    pub mean_add_before: f64,
    pub mean_add_after: f64,
    pub heavy_occlusion_trials: usize,
    pub empty_overlap_trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
}

/// Wall-clock statistics, microseconds per iteration.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TimingReport {
    pub render: Percentiles,
    pub jacobian: Percentiles,
    pub solve: Percentiles,
    pub iteration: Percentiles,
    /// p50 of the cumulative time to run `k` iterations, `k = 0..=t`.
    pub cumulative_p50: Vec<f64>,
}

/// Everything measured by a run. Serialization leaves out `timing`, which
/// varies between runs; it is written to its own file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub n_trials: usize,
    pub seed: u64,
    pub iterations: usize,
    pub diameter: f64,
    pub summary: Summary,
    pub curve: Vec<CurvePoint>,
    pub trials: Vec<TrialReport>,
    #[serde(skip)]
    pub timing: TimingReport,
}

struct TrialRun {
    report: TrialReport,
    stages: Vec<[f64; 4]>,
    cumulative: Vec<f64>,
}

fn run_trial(cfg: &ScenarioConfig, assets: &SceneAssets, index: usize, opts: &BenchmarkOptions) -> Result<TrialRun> {
    let sample = generate_trial(cfg, assets, index)?;
    let params = &assets.params;
    let mesh = &assets.refine;
    let trace = refine_with(&sample.input, mesh, &sample.initial, &sample.intrinsics, params, &opts.refine)?;
    let add_curve = (0..=params.iterations)
        .map(|k| add_or_adds(&trace.pose_after(k), &sample.truth, mesh))
        .collect::<Result<Vec<_>>>()?;
    let before = summarize(&sample.initial, &sample.truth, mesh, assets.diameter)?;
    let after = summarize(&trace.final_pose, &sample.truth, mesh, assets.diameter)?;
    let converged = after.add_or_adds() < ACCURACY_FRACTION * assets.diameter;

    let stages = trace
        .records
        .iter()
        .map(|r| [r.stages.render, r.stages.jacobian, r.stages.solve, r.micros])
        .collect();
    let mut cumulative = vec![0.0];
    for k in 1..=params.iterations {
        let extra = trace.records.get(k - 1).map_or(0.0, |r| r.micros);
        cumulative.push(cumulative[k - 1] + extra);
    }
    Ok(TrialRun {
        report: TrialReport {
            trial: index,
            before,
            after,
            add_curve,
            converged,
            empty_overlap: trace.empty_overlap,
            heavy_occlusion: trace.heavy_occlusion,
        },
        stages,
        cumulative,
    })
}

fn percentiles(values: &[f64]) -> Percentiles {
    Percentiles {
        p50: percentile(values, 50.0).unwrap_or(0.0),
        p95: percentile(values, 95.0).unwrap_or(0.0),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs a benchmark over prepared assets.
pub fn run_benchmark_with(cfg: &ScenarioConfig, assets: &SceneAssets, opts: &BenchmarkOptions) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let mut assets = assets.clone();
    if let Some(t) = opts.iterations {
        assets.params = assets.params.with_iterations(t);
    }
    let work = || {
        (0..cfg.n_trials)
            .into_par_iter()
            .map(|i| run_trial(cfg, &assets, i, opts))
            .collect::<Result<Vec<_>>>()
    };
    let runs = match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?
            .install(work)?,
        None => work()?,
    };

    let t = assets.params.iterations;
    let d = assets.diameter;
    let auc_max = AUC_FRACTION * d;
    let curve = (0..=t)
        .map(|k| {
            let adds: Vec<f64> = runs.iter().map(|r| r.report.add_curve[k]).collect();
            Ok(CurvePoint {
                iteration: k,
                mean_add: mean(&adds),
                median_add: percentile(&adds, 50.0).unwrap_or(0.0),
                acc_at_0p1d: add_accuracy(&adds, d, ACCURACY_FRACTION)?,
                auc: auc_add(&adds, auc_max)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let before: Vec<f64> = runs.iter().map(|r| r.report.before.add_or_adds()).collect();
    let after: Vec<f64> = runs.iter().map(|r| r.report.after.add_or_adds()).collect();
    let summary = Summary {
        acc_at_0p1d_before: add_accuracy(&before, d, ACCURACY_FRACTION)?,
        acc_at_0p1d_after: add_accuracy(&after, d, ACCURACY_FRACTION)?,
        auc_before: auc_add(&before, auc_max)?,
        auc_after: auc_add(&after, auc_max)?,
        tight_after: add_accuracy(&after, d, TIGHT_FRACTION)?,
        mean_add_before: mean(&before),
        mean_add_after: mean(&after),
        heavy_occlusion_trials: runs.iter().filter(|r| r.report.heavy_occlusion).count(),
        empty_overlap_trials: runs.iter().filter(|r| r.report.empty_overlap).count(),
    };

    let column = |c: usize| -> Vec<f64> { runs.iter().flat_map(|r| r.stages.iter().map(move |s| s[c])).collect() };
    let timing = TimingReport {
        render: percentiles(&column(0)),
        jacobian: percentiles(&column(1)),
        solve: percentiles(&column(2)),
        iteration: percentiles(&column(3)),
        cumulative_p50: (0..=t)
            .map(|k| {
                let v: Vec<f64> = runs.iter().map(|r| r.cumulative[k]).collect();
                percentile(&v, 50.0).unwrap_or(0.0)
            })
            .collect(),
    };

    Ok(BenchmarkReport {
        n_trials: cfg.n_trials,
        seed: cfg.seed,
        iterations: t,
        diameter: d,
        summary,
        curve,
        trials: runs.into_iter().map(|r| r.report).collect(),
        timing,
    })
}

/// Prepares assets from the config (and optional checkpoint) and runs.
pub fn run_benchmark(cfg: &ScenarioConfig, checkpoint: Option<&Path>, opts: &BenchmarkOptions) -> Result<BenchmarkReport> {
    let assets = SceneAssets::prepare(cfg, checkpoint)?;
    run_benchmark_with(cfg, &assets, opts)
}

impl BenchmarkReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn trials_csv(&self) -> String {
        let mut s = String::from("trial,add_before,add_after,adds_after,rot_err_deg,trans_err_rel,converged\n");
        for t in &self.trials {
            let rot = t.after.rot_err_deg.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t.trial, t.before.add, t.after.add, t.after.add_s, rot, t.after.trans_err_rel, t.converged
            ));
        }
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("iteration,mean_add,acc_at_0p1d,p50_micros\n");
        for (p, micros) in self.curve.iter().zip(&self.timing.cumulative_p50) {
            s.push_str(&format!("{},{},{},{}\n", p.iteration, p.mean_add, p.acc_at_0p1d, micros));
        }
        s
    }

    /// Writes `report.json`, `trials.csv`, `curve.csv` and `timing.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", self.to_json()?),
            ("trials.csv", self.trials_csv()),
            ("curve.csv", self.curve_csv()),
            ("timing.json", serde_json::to_string_pretty(&self.timing)?),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_iterations_keep_metrics() {
        let cfg = ScenarioConfig::standard(6, 3);
        let opts = BenchmarkOptions { iterations: Some(0), ..Default::default() };
        let r = run_benchmark(&cfg, None, &opts).unwrap();
        for t in &r.trials {
            assert_eq!(t.before, t.after);
            assert_eq!(t.add_curve.len(), 1);
        }
        assert_eq!(r.summary.acc_at_0p1d_before, r.summary.acc_at_0p1d_after);
        assert_eq!(r.curve.len(), 1);
    }

    #[test]
    fn csv_shapes() {
        let cfg = ScenarioConfig::standard(3, 1);
        let r = run_benchmark(&cfg, None, &BenchmarkOptions::default()).unwrap();
        let trials = r.trials_csv();
        assert_eq!(trials.lines().count(), 4);
        assert!(trials.starts_with("trial,add_before,add_after,adds_after,rot_err_deg,trans_err_rel,converged\n"));
        let curve = r.curve_csv();
        assert_eq!(curve.lines().count(), r.iterations + 2);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(json.get("timing").is_none());
        assert_eq!(json["trials"].as_array().unwrap().len(), 3);
        for p in &r.curve {
            assert!((0.0..=100.0).contains(&p.acc_at_0p1d));
            assert!((0.0..=100.0).contains(&p.auc));
        }
    }
}
