//! `openseg` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3
//! missing input artifact. Outputs are assembled under `<out>.partial` and
//! renamed into place only when complete.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

pub use config::{parse_tpr_list, RunArgs, RunConfig, UucSpec};

use crate::eval::{MeanStd, RocCurve};
use crate::maps::Method;
use crate::pipeline::{self, Fitted, LocoReport, PipelineError, SceneScores, ScoreArtifacts, ScorerConfig};
use crate::synth::{generate_scene_indexed, Layout, SynthConfig, SynthError};
use crate::tensor_store::{read_scene, write_scene, Scene, StoreError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Pipeline(PipelineError),
    #[error("synth::generate_scene: {0}")]
    Synth(#[from] SynthError),
    #[error("tensor_store::{op}: {source}")]
    Store { op: &'static str, source: StoreError },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => CliError::Config(m),
            PipelineError::MissingArtifact(p) => CliError::MissingArtifact(p),
            e => CliError::Pipeline(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "openseg", version, about = "Open-set scoring and LOCO evaluation for semantic segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes.
    Synth(SynthArgs),
    /// Fit per-class models on scenes (one class optionally held out).
    Fit(RunArgs),
    /// Write knownness score maps and prior predictions.
    Score(RunArgs),
    /// Calibrate thresholds and compute LOCO metrics from score maps.
    Evaluate(RunArgs),
    /// fit, score and evaluate in one go.
    Pipeline(RunArgs),
    /// Time scoring of synthetic patches for every method.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct SynthArgs {
    /// JSON synth config; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Square grid side.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub sep: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of pixels with wrong-class logits.
    #[arg(long)]
    pub noise: Option<f64>,
    /// stripes | blobs
    #[arg(long)]
    pub layout: Option<String>,
    /// Number of scenes.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, clap::Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub components: usize,
    /// Timed patches per method.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional CSV of per-patch timings.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Output directory assembled under a `.partial` sibling.
struct Staged {
    target: PathBuf,
    tmp: PathBuf,
}

impl Staged {
    fn new(target: &Path) -> Result<Self, CliError> {
        let mut name = target.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        let tmp = target.with_file_name(name);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        Ok(Self {
            target: target.to_path_buf(),
            tmp,
        })
    }

    fn path(&self) -> &Path {
        &self.tmp
    }

    fn commit(self) -> Result<(), CliError> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(io_err(&self.target))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(io_err(&self.target))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a T,
}

fn write_run_json<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<(), CliError> {
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    write_text(&dir.join("run.json"), &to_json(&record))
}

/// Loads one scene or every scene directory below `path`, sorted by name.
pub fn load_scenes(path: &Path) -> Result<(Vec<String>, Vec<Scene>), CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    let dirs: Vec<PathBuf> = if path.join(crate::tensor_store::MANIFEST_FILE).exists() {
        vec![path.to_path_buf()]
    } else {
        let mut dirs: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(crate::tensor_store::MANIFEST_FILE).exists())
            .collect();
        dirs.sort();
        dirs
    };
    if dirs.is_empty() {
        return Err(CliError::Config(format!("no scenes found under {}", path.display())));
    }
    let scenes = dirs
        .par_iter()
        .map(|d| read_scene(d).map_err(|source| CliError::Store { op: "read_scene", source }))
        .collect::<Result<Vec<_>, _>>()?;
    let names = dirs
        .iter()
        .map(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    Ok((names, scenes))
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} worker threads: {e}")))
}

/// Parses arguments and runs; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("openseg: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Bench(a) => thread_pool(1)?.install(|| cmd_bench(&a)),
        Command::Fit(a) => with_config(&a, cmd_fit),
        Command::Score(a) => with_config(&a, cmd_score),
        Command::Evaluate(a) => with_config(&a, cmd_evaluate),
        Command::Pipeline(a) => with_config(&a, cmd_pipeline),
    }
}

fn with_config(args: &RunArgs, f: fn(&RunConfig) -> Result<(), CliError>) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    thread_pool(cfg.jobs)?.install(|| f(&cfg))
}

fn resolve_synth(a: &SynthArgs) -> Result<SynthConfig, CliError> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => config::read_config_file(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.classes {
        cfg.classes = v;
    }
    if let Some(v) = a.size {
        cfg.height = v;
        cfg.width = v;
    }
    if let Some(v) = a.sep {
        cfg.separation = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.noise {
        cfg.label_noise = v;
    }
    if let Some(l) = &a.layout {
        cfg.layout = match l.as_str() {
            "stripes" => Layout::Stripes,
            "blobs" => Layout::Blobs,
            other => return Err(CliError::Config(format!("unknown layout {other:?} (stripes, blobs)"))),
        };
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if a.count == 0 {
        return Err(CliError::Config("--count must be >= 1".into()));
    }
    Ok(cfg)
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = resolve_synth(a)?;
    let staged = Staged::new(&a.out)?;
    (0..a.count).into_par_iter().try_for_each(|i| {
        let scene = generate_scene_indexed(&cfg, i as u64)?;
        let dir = staged.path().join(format!("scene_{i:03}"));
        write_scene(&dir, &scene).map_err(|source| CliError::Store { op: "write_scene", source })
    })?;
    #[derive(Serialize)]
    struct SynthRun<'a> {
        #[serde(flatten)]
        synth: &'a SynthConfig,
        count: usize,
    }
    write_run_json(staged.path(), "synth", &SynthRun { synth: &cfg, count: a.count })?;
    staged.commit()
}

fn fit_models(cfg: &RunConfig, fit_dir: &Path, uuc: Option<usize>) -> Result<Fitted, CliError> {
    let (_, scenes) = load_scenes(fit_dir)?;
    Ok(pipeline::fit(&scenes, uuc, &cfg.scorer)?)
}

fn cmd_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let scenes = cfg.require(&cfg.scenes, "scenes")?;
    let out = cfg.require(&cfg.out, "out")?;
    let fitted = fit_models(cfg, scenes, cfg.single_uuc()?)?;
    let staged = Staged::new(out)?;
    pipeline::save_models(staged.path(), &fitted)?;
    write_run_json(staged.path(), "fit", cfg)?;
    staged.commit()
}

/// Per-scene scoring wall time in seconds, in scene order.
fn score_timed(scenes: &[Scene], fitted: &Fitted) -> Result<(Vec<SceneScores>, Vec<f64>), CliError> {
    let results = scenes
        .par_iter()
        .map(|s| {
            let t0 = Instant::now();
            let r = pipeline::score_scene(s, fitted)?;
            Ok((r, t0.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(results.into_iter().unzip())
}

/// Mean and half-width of the 95% t-Student interval.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let ms = MeanStd::of(values);
    if n < 2 {
        return (ms.mean, 0.0);
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid dof")
        .inverse_cdf(0.975);
    (ms.mean, t * ms.std / (n as f64).sqrt())
}

fn timing_csv(names: &[String], scenes: &[Scene], times: &[f64]) -> String {
    let mut out = String::from("scene,height,width,seconds\n");
    for ((n, s), t) in names.iter().zip(scenes).zip(times) {
        let _ = writeln!(out, "{n},{},{},{t:.6}", s.height(), s.width());
    }
    let (mean, ci) = mean_ci95(times);
    let _ = writeln!(out, "# mean,{mean:.6},ci95,{ci:.6}");
    out
}

fn write_scores(
    dir: &Path,
    fitted: &Fitted,
    names: Vec<String>,
    scored: Vec<SceneScores>,
    pgm: bool,
) -> Result<ScoreArtifacts, CliError> {
    let art = ScoreArtifacts {
        method: fitted.method(),
        uuc: fitted.uuc,
        class_names: fitted.class_names.clone(),
        scene_names: names,
        scenes: scored,
    };
    pipeline::save_scores(dir, &art, pgm)?;
    Ok(art)
}

fn cmd_score(cfg: &RunConfig) -> Result<(), CliError> {
    let models = cfg.require(&cfg.models, "models")?;
    let scenes_dir = cfg.require(&cfg.scenes, "scenes")?;
    let out = cfg.require(&cfg.out, "out")?;
    let mut fitted = pipeline::load_models(models)?;
    // Scoring-time options come from this run, not the fit.
    fitted.config.z_normalize = cfg.scorer.z_normalize;
    fitted.config.strict = cfg.scorer.strict;
    if fitted.method() == Method::Openfcn {
        fitted.config.quantile = cfg.scorer.quantile;
        if let pipeline::FittedModels::OpenFcn(set) = &mut fitted.models {
            set.config.quantile = cfg.scorer.quantile;
        }
    }
    if let Some(u) = cfg.single_uuc()? {
        if fitted.uuc != Some(u) {
            return Err(CliError::Config(format!("models were fit with uuc {:?}, not {u}", fitted.uuc)));
        }
    }
    let (names, scenes) = load_scenes(scenes_dir)?;
    let (scored, times) = score_timed(&scenes, &fitted)?;
    let staged = Staged::new(out)?;
    write_scores(staged.path(), &fitted, names.clone(), scored, cfg.pgm)?;
    write_text(&staged.path().join("timing.csv"), &timing_csv(&names, &scenes, &times))?;
    write_run_json(staged.path(), "score", cfg)?;
    let (mean, ci) = mean_ci95(&times);
    eprintln!("scored {} scenes: {mean:.4} s/scene +- {ci:.4} (95% CI)", scenes.len());
    staged.commit()
}

fn roc_csv(roc: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &roc.points {
        let _ = writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    out
}

/// Evaluates stored scores against scenes; the report is written under `dir`.
fn evaluate_into(dir: &Path, art: &ScoreArtifacts, names: &[String], scenes: &[Scene], tprs: &[f64]) -> Result<LocoReport, CliError> {
    if art.scene_names != names {
        return Err(CliError::Config(format!(
            "score maps cover scenes {:?}, evaluation scenes are {:?}",
            art.scene_names, names
        )));
    }
    let fitted = Fitted {
        config: ScorerConfig {
            method: art.method,
            ..ScorerConfig::default()
        },
        uuc: art.uuc,
        class_names: art.class_names.clone(),
        fusion: Vec::new(),
        models: pipeline::FittedModels::Softmax,
    };
    let (report, roc) = pipeline::loco_report(scenes, &art.scenes, &fitted, tprs)?;
    write_text(&dir.join("report.json"), &to_json(&report))?;
    write_text(&dir.join("roc.csv"), &roc_csv(&roc))?;
    Ok(report)
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let scores = cfg.require(&cfg.scores, "scores")?;
    let scenes_dir = cfg.require(&cfg.scenes, "scenes")?;
    let out = cfg.require(&cfg.out, "out")?;
    let art = pipeline::load_scores(scores)?;
    match (cfg.single_uuc()?, art.uuc) {
        (_, None) => {
            return Err(CliError::Config(
                "score maps were produced without a held-out class; rerun fit with --uuc".into(),
            ))
        }
        (Some(u), Some(a)) if u != a => {
            return Err(CliError::Config(format!("score maps hold out class {a}, not {u}")));
        }
        _ => {}
    }
    let (names, scenes) = load_scenes(scenes_dir)?;
    let staged = Staged::new(out)?;
    let report = evaluate_into(staged.path(), &art, &names, &scenes, &cfg.tpr)?;
    write_run_json(staged.path(), "evaluate", cfg)?;
    eprintln!("{}: uuc {} AUC {:.4}", report.method, report.uuc_name, report.auc);
    staged.commit()
}

fn pipeline_one(cfg: &RunConfig, dir: &Path, uuc: usize, fit: &[Scene], names: &[String], scenes: &[Scene]) -> Result<LocoReport, CliError> {
    let fitted = pipeline::fit(fit, Some(uuc), &cfg.scorer)?;
    let models = dir.join("models");
    fs::create_dir_all(&models).map_err(io_err(&models))?;
    pipeline::save_models(&models, &fitted)?;

    let (scored, times) = score_timed(scenes, &fitted)?;
    let scores = dir.join("scores");
    fs::create_dir_all(&scores).map_err(io_err(&scores))?;
    write_scores(&scores, &fitted, names.to_vec(), scored, cfg.pgm)?;
    write_text(&scores.join("timing.csv"), &timing_csv(names, scenes, &times))?;

    // Evaluate from the stored (f32) maps so `evaluate` on these artifacts
    // reproduces the report exactly.
    let art = pipeline::load_scores(&scores)?;
    evaluate_into(dir, &art, names, scenes, &cfg.tpr)
}

#[derive(Debug, Serialize)]
struct TprSummary {
    target_tpr: f64,
    acc_known: MeanStd,
    pre_unknown: MeanStd,
    kappa: MeanStd,
}

#[derive(Debug, Serialize)]
struct PipelineSummary {
    method: Method,
    runs: usize,
    auc: MeanStd,
    closed_acc_known: MeanStd,
    closed_kappa: MeanStd,
    operating_points: Vec<TprSummary>,
    per_uuc: Vec<(String, f64)>,
}

fn summarize(reports: &[LocoReport], tprs: &[f64]) -> PipelineSummary {
    let col = |f: &dyn Fn(&LocoReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    PipelineSummary {
        method: reports[0].method,
        runs: reports.len(),
        auc: col(&|r| r.auc),
        closed_acc_known: col(&|r| r.closed.acc_known),
        closed_kappa: col(&|r| r.closed.kappa),
        operating_points: tprs
            .iter()
            .enumerate()
            .map(|(i, &t)| TprSummary {
                target_tpr: t,
                acc_known: col(&|r| r.operating_points[i].acc_known),
                pre_unknown: col(&|r| r.operating_points[i].pre_unknown),
                kappa: col(&|r| r.operating_points[i].kappa),
            })
            .collect(),
        per_uuc: reports.iter().map(|r| (r.uuc_name.clone(), r.auc)).collect(),
    }
}

fn cmd_pipeline(cfg: &RunConfig) -> Result<(), CliError> {
    let scenes_dir = cfg.require(&cfg.scenes, "scenes")?;
    let out = cfg.require(&cfg.out, "out")?;
    let uuc = cfg
        .uuc
        .ok_or_else(|| CliError::Config("--uuc is required (class id or \"all\")".into()))?;
    let (names, scenes) = load_scenes(scenes_dir)?;
    let fit_scenes = match &cfg.fit_scenes {
        Some(p) => load_scenes(p)?.1,
        None => scenes.clone(),
    };
    let staged = Staged::new(out)?;
    match uuc {
        UucSpec::One(u) => {
            let report = pipeline_one(cfg, staged.path(), u, &fit_scenes, &names, &scenes)?;
            eprintln!("{}: uuc {} AUC {:.4}", report.method, report.uuc_name, report.auc);
        }
        UucSpec::All(_) => {
            let num_classes = scenes[0].num_classes();
            let mut reports = Vec::with_capacity(num_classes);
            for u in 0..num_classes {
                let dir = staged.path().join(format!("uuc{u}"));
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let report = pipeline_one(cfg, &dir, u, &fit_scenes, &names, &scenes)?;
                eprintln!("{}: uuc {} AUC {:.4}", report.method, report.uuc_name, report.auc);
                reports.push(report);
            }
            let summary = summarize(&reports, &cfg.tpr);
            eprintln!("{}: mean AUC {:.4} +- {:.4}", summary.method, summary.auc.mean, summary.auc.std);
            write_text(&staged.path().join("summary.json"), &to_json(&summary))?;
        }
    }
    write_run_json(staged.path(), "pipeline", cfg)?;
    staged.commit()
}

fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    if a.repeats == 0 {
        return Err(CliError::Config("--repeats must be >= 1".into()));
    }
    let synth = SynthConfig {
        classes: a.classes,
        height: a.size,
        width: a.size,
        seed: a.seed,
        ..SynthConfig::default()
    };
    synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let train = generate_scene_indexed(&synth, 0)?;
    let patches = (1..=a.repeats as u64)
        .map(|i| generate_scene_indexed(&synth, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = String::from("method,patch,seconds\n");
    println!("method      mean_s     ci95_s   ({}x{} px, D={}, {} patches)", a.size, a.size, synth.feature_dim(), a.repeats);
    for method in Method::ALL {
        let cfg = ScorerConfig {
            method,
            components: a.components,
            seed: a.seed,
            ..ScorerConfig::default()
        };
        let fitted = pipeline::fit(std::slice::from_ref(&train), None, &cfg)?;
        let mut times = Vec::with_capacity(patches.len());
        for (i, p) in patches.iter().enumerate() {
            let t0 = Instant::now();
            pipeline::score_scene(p, &fitted)?;
            let t = t0.elapsed().as_secs_f64();
            let _ = writeln!(csv, "{method},{i},{t:.6}");
            times.push(t);
        }
        let (mean, ci) = mean_ci95(&times);
        println!("{:<10} {mean:>8.4} {ci:>10.4}", method.as_str());
    }
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
    }
    Ok(())
}
