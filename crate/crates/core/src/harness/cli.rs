//! Command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::error::{Error, Result};
use crate::mesh::{init_textures, mesh_stats, validate_strict, TextureInit};
use crate::metrics::add_or_adds;
use crate::optimizer::{refine_with, RefineOptions};
use crate::renderer::{dump_render, rasterize};
use crate::training::{train, Checkpoint};

use super::benchmark::{run_benchmark_with, BenchmarkOptions};
use super::scenario::{generate_trial, SceneAssets, ScenarioConfig, ORACLE_CHANNELS};
use super::selfcheck;

/// Trials used when no config file is given.
const DEFAULT_TRIALS: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "repose", version, about = "Render-and-refine 6D pose estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario config (JSON). Defaults to the builtin standard scenario.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for benchmark trials.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the number of LM iterations.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Trained checkpoint JSON (written by `train`, read by the others).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Gain-ratio damping instead of the fixed schedule.
    #[arg(long, global = true)]
    pub adaptive_lambda: bool,
    /// Trial index for `render` and `refine`.
    #[arg(long, global = true, default_value_t = 0)]
    pub trial: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dump debug images of the true and initial pose renders.
    Render,
    /// Refine one trial and print the trace.
    Refine,
    /// Train textures and solver parameters, write a checkpoint.
    Train,
    /// Run the Monte Carlo benchmark and write reports.
    Benchmark,
    /// Run the finite-difference, oracle and runtime self-checks.
    Check,
    /// Validate the config and mesh.
    Validate,
}

impl Cli {
    fn scenario(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::standard(DEFAULT_TRIALS, 0),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.iterations {
            cfg.refine.iterations = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("repose_out"))
    }

    /// `--checkpoint` made absolute so it never resolves against the config
    /// directory.
    fn checkpoint_path(&self) -> Result<Option<PathBuf>> {
        match &self.checkpoint {
            Some(p) if p.is_relative() => {
                let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
                Ok(Some(cwd.join(p)))
            }
            other => Ok(other.clone()),
        }
    }

    fn assets(&self, cfg: &ScenarioConfig) -> Result<SceneAssets> {
        SceneAssets::prepare(cfg, self.checkpoint_path()?.as_deref())
    }

    fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            adaptive_lambda: self.adaptive_lambda,
            tolerance: None,
        }
    }
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(line: &str) -> Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

fn cmd_render(cli: &Cli) -> Result<()> {
    let cfg = cli.scenario()?;
    let assets = cli.assets(&cfg)?;
    let sample = generate_trial(&cfg, &assets, cli.trial)?;
    let out = cli.out_dir();
    let truth = rasterize(&assets.refine, &sample.truth, &sample.intrinsics)?;
    let initial = rasterize(&assets.refine, &sample.initial, &sample.intrinsics)?;
    dump_render(&truth, out.join("truth"))?;
    dump_render(&initial, out.join("initial"))?;
    print_json(&json!({
        "out": out,
        "truth_pixels": truth.feature.masked_count(),
        "initial_pixels": initial.feature.masked_count(),
        "input_pixels": sample.input.masked_count(),
    }))
}

fn cmd_refine(cli: &Cli) -> Result<()> {
    let cfg = cli.scenario()?;
    let assets = cli.assets(&cfg)?;
    let sample = generate_trial(&cfg, &assets, cli.trial)?;
    let mesh = &assets.refine;
    let trace = refine_with(
        &sample.input,
        mesh,
        &sample.initial,
        &sample.intrinsics,
        &assets.params,
        &cli.refine_options(),
    )?;
    let before = add_or_adds(&sample.initial, &sample.truth, mesh)?;
    let after = add_or_adds(&trace.final_pose, &sample.truth, mesh)?;
    print_json(&json!({
        "trace": trace.to_json(),
        "truth": sample.truth,
        "initial_pose": sample.initial,
        "final_pose": trace.final_pose,
        "diameter": assets.diameter,
        "add_before": before,
        "add_after": after,
        "empty_overlap": trace.empty_overlap,
        "heavy_occlusion": trace.heavy_occlusion,
    }))
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = cli.scenario()?;
    let tc = cfg.train.unwrap_or_default();
    let mut source_cfg = cfg.clone();
    source_cfg.texture_source = super::scenario::TextureSource::Oracle;
    let assets = SceneAssets::prepare(&source_cfg, None)?;
    let samples = (0..cfg.n_trials)
        .map(|i| generate_trial(&cfg, &assets, i))
        .collect::<Result<Vec<_>>>()?;
    let start = init_textures(
        &assets.source,
        TextureInit::UniformRandom {
            lo: -0.1,
            hi: 0.1,
            seed: tc.seed,
        },
        ORACLE_CHANNELS,
    )?;
    let outcome = train(&samples, &start, &assets.params, &tc)?;
    let path = match &cli.checkpoint {
        Some(p) => p.clone(),
        None => {
            let dir = cli.out_dir();
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            dir.join("checkpoint.json")
        }
    };
    Checkpoint::from_outcome(&outcome).save(&path)?;
    print_json(&json!({
        "checkpoint": path,
        "epochs": outcome.history.len(),
        "first": outcome.history.first(),
        "last": outcome.history.last(),
        "lambda": outcome.params.lambda,
        "gamma": outcome.params.gamma,
    }))
}

fn cmd_benchmark(cli: &Cli) -> Result<()> {
    let cfg = cli.scenario()?;
    let assets = cli.assets(&cfg)?;
    let opts = BenchmarkOptions {
        jobs: cli.jobs,
        iterations: None,
        refine: cli.refine_options(),
    };
    let report = run_benchmark_with(&cfg, &assets, &opts)?;
    let out = cli.out_dir();
    report.write(&out)?;
    print_json(&json!({ "out": out, "summary": report.summary, "timing": report.timing }))
}

fn cmd_check() -> Result<bool> {
    let results = selfcheck::run_all();
    for r in &results {
        emit(&format!(
            "{} {:<18} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        ))?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn cmd_validate(cli: &Cli) -> Result<bool> {
    let cfg = cli.scenario()?;
    let mesh = cfg.load_mesh(ORACLE_CHANNELS)?;
    let stats = mesh_stats(&mesh)?;
    let issues = validate_strict(&mesh);
    if let Some(ckpt) = cli.checkpoint_path()? {
        Checkpoint::load(&ckpt, &mesh)?;
    }
    print_json(&json!({
        "mesh": cfg.mesh,
        "vertices": stats.vertex_count,
        "faces": stats.face_count,
        "diameter": stats.diameter,
        "symmetric": mesh.is_symmetric(),
        "issues": issues,
    }))?;
    Ok(issues.is_empty())
}

fn report_error(e: &Error) {
    eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
}

/// Runs a parsed command; `Ok(false)` means the command ran but found
/// failures.
pub fn execute(cli: &Cli) -> Result<bool> {
    match cli.command {
        Command::Render => cmd_render(cli).map(|_| true),
        Command::Refine => cmd_refine(cli).map(|_| true),
        Command::Train => cmd_train(cli).map(|_| true),
        Command::Benchmark => cmd_benchmark(cli).map(|_| true),
        Command::Check => cmd_check(),
        Command::Validate => cmd_validate(cli),
    }
}

/// Entry point: usage errors exit 2, runtime errors and failed checks 1.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            report_error(&e);
            ExitCode::from(1)
        }
    }
}
