use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use semtraj::checkpoint::{load_checkpoint, EmbeddingSource};
use semtraj::chomp::{command_to_cost, is_valid_target, optimize};
use semtraj::dataset::{load_dataset, split_file, split_samples, Sample, DEFAULT_SPLIT};
use semtraj::eval::{
    baseline_table, commands_for, compare_baselines, evaluate_loss, evaluate_semantics, model_predictor,
    oracle_predictor, sweep, LossReport, SemanticReport,
};
use semtraj::geom::{Trajectory, World};
use semtraj::gradsuite::run_suite;
use semtraj::language::{parse_command, Split};
use semtraj::model::{build_model, EncoderChoice, ModelInput, ModelKind, Reshaper};
use semtraj::train::{stage_b_samples, train, TrainConfig, TrainData, TrainOutput};
use semtraj::Error;
use semtraj_cli::config::Config;
use semtraj_cli::service::{serve, AppState};

#[derive(Parser)]
#[command(name = "semtraj", version, about = "Language-conditioned trajectory reshaping")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file and its train/val/test splits.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate checkpoints on a dataset split; prints the baseline table.
    Eval(EvalArgs),
    /// Apply all direction × intensity commands to one scene.
    Sweep(SweepArgs),
    /// Reshape one trajectory with one command.
    Reshape(ReshapeArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value = "data/dataset.jsonl")]
    out: PathBuf,
    /// Skip writing the split files.
    #[arg(long)]
    no_split: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Transformer,
    Fcn,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Transformer => ModelKind::Transformer,
            KindArg::Fcn => ModelKind::Fcn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Table,
    Scratch,
}

#[derive(Args)]
struct TrainArgs {
    /// Full dataset file; split deterministically 80/10/10 by seed.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "runs/model.ckpt")]
    out: PathBuf,
    /// Defaults to the checkpoint path with a `.metrics.jsonl` extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "transformer")]
    model: KindArg,
    /// `desk` or `paper`; ignored when the config file has a [train] section.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    /// Embedding file for the table encoder (default: synthesized table).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Overrides the stage-A epoch count.
    #[arg(long)]
    epochs_a: Option<usize>,
    /// Overrides the stage-B epoch count.
    #[arg(long)]
    epochs_b: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Re-render commands with holdout synonyms for the semantic check.
    #[arg(long)]
    holdout: bool,
    /// Scenes used for the intensity-monotonicity check.
    #[arg(long, default_value_t = 50)]
    monotonic_scenes: usize,
    /// Write the full report (losses and semantic compliance) as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the baseline comparison as a tab-separated table.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum EngineArg {
    Model,
    Oracle,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Scene file (world JSON); a random scene from `--seed` otherwise.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Target object; default is the first object with an interior closest approach.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    holdout: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReshapeArgs {
    /// World JSON: `{"start":[x,y],"goal":[x,y],"objects":[{"label":..,"pos":[x,y]}]}`.
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    command: String,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Trajectory JSON (list of [x,y]); the A* plan by default.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory served at `/`.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

/// Exit status for a command line that parsed but could not be executed.
struct Exit(u8);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(Exit(code)) = e.downcast_ref::<Exit>() {
                return ExitCode::from(*code);
            }
            if is_broken_pipe(&e) {
                return ExitCode::SUCCESS;
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

impl std::fmt::Debug for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit status {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, cli.seed, a),
        Command::Train(a) => train_cmd(&cfg, cli.seed, a),
        Command::Eval(a) => eval_cmd(&cfg, a),
        Command::Sweep(a) => sweep_cmd(&cfg, cli.seed, a),
        Command::Reshape(a) => reshape_cmd(&cfg, a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Serve(a) => serve_cmd(&cfg, a),
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.downcast_ref::<std::io::Error>()
        .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

/// One JSON document on stdout.
fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value).map_err(std::io::Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn gen_data(cfg: &Config, seed: Option<u64>, a: GenDataArgs) -> Result<()> {
    let generator = cfg.generator()?;
    let seed = cfg.seed(seed, 0);
    ensure_parent(&a.out)?;
    let started = Instant::now();
    let samples = generator.generate_dataset(a.n, seed, &a.out)?;
    eprintln!("wrote {} samples to {} in {:.1?}", samples.len(), a.out.display(), started.elapsed());
    if !a.no_split {
        for p in split_file(&a.out, DEFAULT_SPLIT, &generator.lexicon)? {
            eprintln!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn train_config(cfg: &Config, seed: Option<u64>, a: &TrainArgs) -> Result<TrainConfig> {
    let mut tc = match &cfg.train {
        Some(t) => t.clone(),
        None => TrainConfig::preset(&a.preset)?,
    };
    tc.seed = cfg.seed(seed, tc.seed);
    if let Some(e) = a.encoder {
        tc.model.encoder = match e {
            EncoderArg::Table => EncoderChoice::Table,
            EncoderArg::Scratch => EncoderChoice::Scratch,
        };
    }
    if let Some(p) = &a.embeddings {
        tc.embeddings = EmbeddingSource::File { path: p.clone() };
    }
    if tc.model.encoder == EncoderChoice::Scratch {
        tc.embeddings = EmbeddingSource::None;
    }
    if let Some(e) = a.epochs_a {
        tc.stage_a_epochs = e;
    }
    if let Some(e) = a.epochs_b {
        tc.stage_b_epochs = e;
    }
    tc.validate()?;
    Ok(tc)
}

fn train_cmd(cfg: &Config, seed: Option<u64>, a: TrainArgs) -> Result<()> {
    let generator = cfg.generator()?;
    let tc = train_config(cfg, seed, &a)?;
    let samples = load_dataset(&a.data, &generator.lexicon)?;
    let splits = split_samples(samples, DEFAULT_SPLIT)?;
    let stage_b = stage_b_samples(&generator, &tc)?;
    let table = tc.embeddings.load(tc.model.encoder, tc.model.d_lang)?;
    let kind = ModelKind::from(a.model);
    let mut model = build_model(kind, tc.model.clone(), table, tc.seed)?;
    ensure_parent(&a.out)?;
    let metrics = a.metrics.unwrap_or_else(|| a.out.with_extension("metrics.jsonl"));
    eprintln!(
        "training {} ({} parameters) on {} samples, {} validation, {} stage-B",
        kind.name(),
        model.num_parameters(),
        splits.train.len(),
        splits.val.len(),
        stage_b.len()
    );
    let started = Instant::now();
    let report = train(
        model.as_mut(),
        &TrainData {
            train: &splits.train,
            val: &splits.val,
            stage_b: &stage_b,
        },
        &tc,
        &TrainOutput {
            metrics: Some(metrics.clone()),
            checkpoint: Some(a.out.clone()),
        },
    )?;
    eprintln!(
        "best validation loss {:.6} at epoch {}; {} steps in {:.1?}",
        report.best_val_loss,
        report.best_epoch,
        report.steps,
        started.elapsed()
    );
    eprintln!("checkpoint {}, metrics {}", a.out.display(), metrics.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    losses: Vec<LossReport>,
    semantics: Vec<(String, SemanticReport)>,
    runtime_s: f64,
}

fn select_split(samples: Vec<Sample>, split: SplitArg) -> Result<Vec<Sample>> {
    if let SplitArg::All = split {
        return Ok(samples);
    }
    let s = split_samples(samples, DEFAULT_SPLIT)?;
    let out = match split {
        SplitArg::Train => s.train,
        SplitArg::Val => s.val,
        SplitArg::Test => s.test,
        SplitArg::All => unreachable!(),
    };
    if out.is_empty() {
        bail!("the selected split is empty");
    }
    Ok(out)
}

fn eval_cmd(cfg: &Config, a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let lexicon = cfg.lexicon()?;
    let samples = select_split(load_dataset(&a.data, &lexicon)?, a.split)?;
    let models: Vec<Box<dyn Reshaper>> = a
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|c| c.model))
        .collect::<semtraj::Result<_>>()?;
    let split = if a.holdout { Split::Holdout } else { Split::Train };
    let commands = commands_for(&samples, &lexicon, split)?;
    let mut losses = Vec::new();
    let mut semantics = Vec::new();
    for (path, m) in a.checkpoints.iter().zip(&models) {
        losses.push(evaluate_loss(m.as_ref(), &samples)?);
        let predict = model_predictor(m.as_ref());
        let sem = evaluate_semantics(&predict, &samples, &commands, &lexicon, a.monotonic_scenes)?;
        semantics.push((path.display().to_string(), sem));
    }
    let refs: Vec<&dyn Reshaper> = models.iter().map(|m| m.as_ref()).collect();
    let table = baseline_table(&compare_baselines(&refs, &samples)?);
    std::io::stdout().lock().write_all(table.as_bytes())?;
    if let Some(p) = &a.table {
        ensure_parent(p)?;
        std::fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    let report = EvalReport {
        split: a.split.to_possible_value().map_or_else(String::new, |v| v.get_name().to_string()),
        losses,
        semantics,
        runtime_s: started.elapsed().as_secs_f64(),
    };
    for (path, sem) in &report.semantics {
        eprintln!(
            "{path}: compliance {:.1}%, intensity monotonicity {:.1}%",
            100.0 * sem.overall,
            100.0 * sem.intensity_monotonicity
        );
    }
    match &a.report {
        Some(p) => write_json(p, &report),
        None => Ok(()),
    }
}

fn read_world(path: &Path) -> Result<World> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing world {}", path.display()))
}

fn engine_for(engine: Option<EngineArg>, checkpoint: &Option<PathBuf>) -> Result<EngineArg> {
    match (engine, checkpoint) {
        (Some(EngineArg::Model), None) => bail!("--engine model needs --checkpoint"),
        (Some(e), _) => Ok(e),
        (None, Some(_)) => Ok(EngineArg::Model),
        (None, None) => Ok(EngineArg::Oracle),
    }
}

fn sweep_cmd(cfg: &Config, seed: Option<u64>, a: SweepArgs) -> Result<()> {
    let generator = cfg.generator()?;
    let engine = engine_for(a.engine, &a.checkpoint)?;
    let (world, xi_o) = match &a.world {
        Some(p) => {
            let w = read_world(p)?;
            let t = generator.initial_trajectory(&w)?;
            (w, t)
        }
        None => generator.random_scene(cfg.seed(seed, 0), &generator.cfg.world)?,
    };
    let target = match a.target {
        Some(t) => t,
        None => (0..world.objects.len())
            .find(|&i| is_valid_target(&xi_o, world.objects[i].position))
            .context("no object has an interior closest approach; pass --target")?,
    };
    let split = if a.holdout { Split::Holdout } else { Split::Train };
    let cells = match engine {
        EngineArg::Oracle => {
            let predict = oracle_predictor(&generator.cfg.chomp, &generator.lexicon);
            sweep(&predict, &world, &xi_o, target, &generator.lexicon, split, 0)?
        }
        EngineArg::Model => {
            let model = load_checkpoint(a.checkpoint.as_deref().expect("checked above"))?.model;
            let predict = model_predictor(model.as_ref());
            sweep(&predict, &world, &xi_o, target, &generator.lexicon, split, 0)?
        }
    };
    let out = serde_json::json!({ "world": world, "xi_o": xi_o, "target": target, "cells": cells });
    match &a.out {
        Some(p) => write_json(p, &out),
        None => print_json(&out),
    }
}

fn reshape_cmd(cfg: &Config, a: ReshapeArgs) -> Result<()> {
    let generator = cfg.generator()?;
    let engine = engine_for(a.engine, &a.checkpoint)?;
    let world = read_world(&a.world)?;
    let xi_o: Trajectory = match &a.trajectory {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing trajectory {}", p.display()))?
        }
        None => generator.initial_trajectory(&world)?,
    };
    let out = match engine {
        EngineArg::Oracle => {
            let ast = match parse_command(&a.command, &generator.lexicon, &world.labels()) {
                Ok(ast) => ast,
                Err(e @ Error::Parse(_)) => {
                    eprintln!("error: {e}");
                    return Err(Exit(2).into());
                }
                Err(e) => return Err(e.into()),
            };
            let spec = command_to_cost(&ast, &world, &generator.cfg.chomp)?;
            optimize(&xi_o, &spec, &generator.cfg.chomp)?
        }
        EngineArg::Model => {
            let model = load_checkpoint(a.checkpoint.as_deref().expect("checked above"))?.model;
            let input = ModelInput {
                world: &world,
                xi_o: &xi_o,
                command: &a.command,
            };
            model.predict(&[input])?.remove(0)
        }
    };
    print_json(&serde_json::json!({ "trajectory": out }))
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let started = Instant::now();
    let results = run_suite(a.seeds)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:<28} worst {:.3e} (tolerance {:.0e}, {} seeds)", r.name, r.worst, r.tolerance, r.seeds);
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} failed, {:.1?}", results.len(), started.elapsed());
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn serve_cmd(cfg: &Config, a: ServeArgs) -> Result<()> {
    let generator = cfg.generator()?;
    let model = a.checkpoint.as_deref().map(load_checkpoint).transpose()?.map(|c| c.model);
    let state = Arc::new(AppState::new(model, a.checkpoint.clone(), generator));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        serve(listener, state, a.static_dir).await
    })
}
