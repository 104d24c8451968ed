//! `hmg`: dataset generation, training, motion completion and evaluation
//! from the command line.
//!
//! Exit status is 0 on success, 1 when the pipeline reports an error and 2
//! for invalid usage. Every successful run prints a JSON summary on stdout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hmg_core::dataset::{make_fraction, Dataset, DatasetFraction, Split};
use hmg_core::experts::{build_dataset, library, BehaviorSpec, DEFAULT_NOISE};
use hmg_core::gptcore::{self, ModelCheckpoint};
use hmg_core::harness::{self, AblationSetup, EvalSetup, ExperimentPlan};
use hmg_core::physim::BodyModel;
use hmg_core::rollout::{
    batch_evaluate, motion_completion, render_episode, replay_reference, write_table, ActionPolicy,
    CheckpointPolicy, CompletionOptions, ExpertPolicy, MotionPrompt, ZeroPolicy, GENERATION_CAP,
};
use hmg_core::trainer::{self, TrainConfig, TrainPhase};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "hmg", version, about = "Pre-train, fine-tune and evaluate GPT motion models on a planar biped")]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out expert controllers into a new dataset directory.
    GenData(GenData),
    /// Train the observation model on a dataset's observations.
    Pretrain(Train),
    /// Swap in an action head and fine-tune a pretrained model.
    Finetune(Finetune),
    /// Train an action model from random initialization.
    TrainScratch(Scratch),
    /// Motion completion from every prompt of a split; writes a length table.
    Rollout(Rollout),
    /// Motion completion plus FID, ADE, FDE, DIV and length summaries.
    Evaluate(Evaluate),
    /// Fine-tune on fractions of the train split and plot the length curve.
    Ablation(Ablation),
    /// Run an experiment plan (variants × seeds), resuming finished cells.
    Matrix(Matrix),
    /// Draw one generated episode as SVG.
    Render(Render),
    /// Dump one stored episode as CSV.
    ExportCsv(ExportCsv),
    /// Whole pipeline with micro budgets.
    Demo(Demo),
    /// List the built-in behaviors.
    Behaviors(Behaviors),
    /// Print a preset experiment plan as JSON.
    Plan(PlanArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Full desk budgets (embed 128, 4 layers, 20k steps).
    Desk,
    /// Single-core budgets; expects large, small and eval datasets.
    Compact,
    /// Micro budgets of the demo command.
    Demo,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Directory holding the datasets.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Run output directory.
    #[arg(long, default_value = "runs/matrix")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BehaviorFiles {
    /// Extra behavior definition (JSON); repeatable.
    #[arg(long = "behavior-file", value_name = "FILE")]
    files: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct GenData {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Rollouts per behavior.
    #[arg(long)]
    rollouts: usize,
    /// Dataset name (default: directory name).
    #[arg(long)]
    id: Option<String>,
    /// Comma-separated behaviors to include (default: all).
    #[arg(long, value_delimiter = ',')]
    behaviors: Vec<String>,
    /// Action noise as a fraction of each joint's range, unitless.
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    noise: f64,
    #[command(flatten)]
    extra: BehaviorFiles,
}

#[derive(Args, Debug)]
struct TrainFlags {
    /// Training config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Peak learning rate (pretrain and scratch), per step.
    #[arg(long)]
    lr: Option<f64>,
    /// Windows per batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Steps per training window (at most the context length).
    #[arg(long)]
    window: Option<usize>,
    /// Training log CSV (step, ce_loss, val_mse, lr, seconds).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Train {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct Finetune {
    /// Pretrained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset with actions.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Share of each behavior's train episodes, in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    /// Train only the new head.
    #[arg(long)]
    frozen: bool,
    /// Absolute fine-tune learning rate, per step.
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct Scratch {
    /// Dataset with actions.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Share of each behavior's train episodes, in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    /// The checkpoint given with --checkpoint.
    Model,
    /// Noise-free expert controller.
    Expert,
    /// All-zero joint targets.
    Zero,
}

#[derive(Args, Debug)]
struct Rollout {
    /// Action model checkpoint (required for --policy model).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset supplying prompts.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "validation")]
    split: Split,
    #[arg(long, value_enum, default_value_t = PolicyKind::Model)]
    policy: PolicyKind,
    /// Generation steps per episode (32 per second).
    #[arg(long, default_value_t = GENERATION_CAP)]
    cap: usize,
    /// Episode table CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    extra: BehaviorFiles,
}

#[derive(Args, Debug)]
struct Evaluate {
    /// Action model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pretrained observation model used as feature extractor.
    #[arg(long)]
    extractor: PathBuf,
    /// Dataset supplying prompts and reference motion.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate; repeatable, the first carries the headline scores.
    #[arg(long, default_value = "validation")]
    split: Vec<Split>,
    /// Generation steps per episode (32 per second).
    #[arg(long, default_value_t = GENERATION_CAP)]
    cap: usize,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Model name in the report (default: checkpoint file stem).
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    extra: BehaviorFiles,
}

#[derive(Args, Debug)]
struct Ablation {
    /// Pretrained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Small dataset with actions.
    #[arg(long)]
    data: PathBuf,
    /// Dataset fractions, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.25")]
    fractions: Vec<f64>,
    /// Seeds per fraction, comma-separated (default: --seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Fine-tune config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generation steps per episode (32 per second).
    #[arg(long, default_value_t = GENERATION_CAP)]
    cap: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Matrix {
    /// Experiment plan JSON.
    #[arg(long)]
    plan: PathBuf,
    /// Override the plan's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Render {
    /// Action model checkpoint (required for --policy model).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset holding the episode.
    #[arg(long)]
    data: PathBuf,
    /// Episode id; its first second is the prompt.
    #[arg(long)]
    episode: String,
    #[arg(long, value_enum, default_value_t = PolicyKind::Model)]
    policy: PolicyKind,
    /// Generation steps (32 per second).
    #[arg(long, default_value_t = GENERATION_CAP)]
    cap: usize,
    /// SVG file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    extra: BehaviorFiles,
}

#[derive(Args, Debug)]
struct ExportCsv {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Episode id.
    #[arg(long)]
    episode: String,
    /// CSV file to write (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Demo {
    /// Working directory for datasets and run outputs.
    #[arg(long, default_value = "demo")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Behaviors {
    /// Print full definitions as JSON.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let jobs = if cli.deterministic { Some(1) } else { cli.jobs };
    if let Some(n) = jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global pool set once");
    }
    match run(&cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<Value> {
    let seed = cli.seed;
    match &cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::Pretrain(a) => {
            let ds = open_dataset(&a.data)?;
            let cfg = train_config(&a.train, TrainPhase::Pretrain, seed)?;
            let (c, log) = trainer::pretrain(&ds, &cfg)?;
            finish_training(&c, &log, &a.out, &a.train)
        }
        Command::Finetune(a) => {
            let source = load_checkpoint(&a.checkpoint)?;
            let ds = open_dataset(&a.data)?;
            let mut cfg = train_config(&a.train, TrainPhase::Finetune, seed)?;
            cfg.frozen |= a.frozen;
            if a.finetune_lr.is_some() {
                cfg.finetune_lr = a.finetune_lr;
            }
            let fraction = fraction(&ds, a.fraction, seed)?;
            let (c, log) = trainer::finetune(&source, &ds, fraction.as_ref(), &cfg)?;
            finish_training(&c, &log, &a.out, &a.train)
        }
        Command::TrainScratch(a) => {
            let ds = open_dataset(&a.data)?;
            let cfg = train_config(&a.train, TrainPhase::Scratch, seed)?;
            let fraction = fraction(&ds, a.fraction, seed)?;
            let (c, log) = trainer::train_scratch(&ds, fraction.as_ref(), &cfg)?;
            finish_training(&c, &log, &a.out, &a.train)
        }
        Command::Rollout(a) => rollout(a),
        Command::Evaluate(a) => evaluate(a, seed),
        Command::Ablation(a) => ablation(a, seed),
        Command::Matrix(a) => {
            let mut plan = ExperimentPlan::load(&a.plan).with_context(|| format!("plan {}", a.plan.display()))?;
            if let Some(out) = &a.out {
                plan.output = out.clone();
            }
            let o = harness::run_matrix(&plan)?;
            Ok(json!({
                "output": plan.output,
                "cells": o.cells.len(),
                "trained": o.trained(),
                "variants": o.variants,
                "durability": o.durability,
            }))
        }
        Command::Render(a) => render(a),
        Command::ExportCsv(a) => {
            let ds = open_dataset(&a.data)?;
            match &a.out {
                Some(p) => {
                    let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
                    ds.export_csv(&a.episode, f)?;
                }
                None => ds.export_csv(&a.episode, std::io::stdout().lock())?,
            }
            Ok(json!({ "episode": a.episode, "out": a.out }))
        }
        Command::Demo(a) => {
            let o = harness::run_demo(&a.out, seed)?;
            Ok(json!({
                "output": a.out,
                "variants": o.matrix.variants,
                "ablation": o.ablation.points,
            }))
        }
        Command::Plan(a) => {
            let plan = match a.preset {
                Preset::Desk => ExperimentPlan {
                    datasets: ["large", "small"].into_iter().map(|k| (k.to_string(), a.data.join(k))).collect(),
                    output: a.out.clone(),
                    ..ExperimentPlan::default()
                },
                Preset::Compact => harness::compact_plan(&a.data, &a.out),
                Preset::Demo => {
                    let mut p = harness::demo_plan(&a.data, seed);
                    p.datasets = ["large", "small"].into_iter().map(|k| (k.to_string(), a.data.join(k))).collect();
                    p.output = a.out.clone();
                    p
                }
            };
            Ok(serde_json::to_value(&plan)?)
        }
        Command::Behaviors(a) => {
            let lib = library();
            if a.json {
                let all: Vec<Value> = lib.iter().map(|b| serde_json::from_str(&b.to_json()).expect("valid JSON")).collect();
                Ok(Value::Array(all))
            } else {
                Ok(Value::Array(
                    lib.iter()
                        .map(|b| json!({ "name": b.name, "category": b.category, "duration": b.duration }))
                        .collect(),
                ))
            }
        }
    }
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    Dataset::open(path).with_context(|| format!("dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    gptcore::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

fn behaviors(extra: &BehaviorFiles) -> Result<Vec<BehaviorSpec>> {
    let mut lib = library();
    for f in &extra.files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let b = BehaviorSpec::from_json(&text).with_context(|| format!("behavior {}", f.display()))?;
        lib.retain(|x| x.name != b.name);
        lib.push(b);
    }
    Ok(lib)
}

fn gen_data(a: &GenData, seed: u64) -> Result<Value> {
    let all = behaviors(&a.extra)?;
    let chosen: Vec<BehaviorSpec> = if a.behaviors.is_empty() {
        all
    } else {
        a.behaviors
            .iter()
            .map(|n| {
                all.iter()
                    .find(|b| &b.name == n)
                    .cloned()
                    .with_context(|| format!("unknown behavior `{n}`"))
            })
            .collect::<Result<_>>()?
    };
    let id = match &a.id {
        Some(id) => id.clone(),
        None => a
            .out
            .file_name()
            .and_then(|n| n.to_str())
            .context("--out has no usable directory name; pass --id")?
            .to_string(),
    };
    let ds = build_dataset(&a.out, &id, &chosen, a.rollouts, a.noise, seed, &BodyModel::biped())?;
    let m = ds.manifest();
    Ok(json!({
        "dataset": m.id,
        "path": a.out,
        "episodes": m.episodes.len(),
        "train": m.split(Split::Train).count(),
        "validation": m.split(Split::Validation).count(),
        "behaviors": m.behaviors,
    }))
}

fn train_config(f: &TrainFlags, phase: TrainPhase, seed: u64) -> Result<TrainConfig> {
    let mut cfg = match &f.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut c: TrainConfig = serde_json::from_str(&text).with_context(|| format!("config {}", p.display()))?;
            c.phase = phase;
            c
        }
        None => TrainConfig::for_phase(phase),
    };
    cfg.seed = seed;
    if let Some(v) = f.steps {
        cfg.steps = v;
    }
    if let Some(v) = f.lr {
        cfg.lr = v;
    }
    if let Some(v) = f.batch {
        cfg.batch = v;
    }
    if let Some(v) = f.window {
        cfg.window = v;
    }
    Ok(cfg)
}

fn fraction(ds: &Dataset, fraction: Option<f64>, seed: u64) -> Result<Option<DatasetFraction>> {
    Ok(match fraction {
        Some(f) if f < 1.0 => Some(make_fraction(ds.manifest(), f, seed)?),
        Some(f) if f > 1.0 || f.is_nan() => bail!("--fraction must be in (0, 1], got {f}"),
        _ => None,
    })
}

fn finish_training(c: &ModelCheckpoint, log: &trainer::TrainLog, out: &Path, flags: &TrainFlags) -> Result<Value> {
    gptcore::save(c, out)?;
    if let Some(p) = &flags.log {
        log.save_csv(p)?;
    }
    let last = log.last();
    Ok(json!({
        "checkpoint": out,
        "phase": c.provenance.phase,
        "steps": c.provenance.steps,
        "params": c.config.num_params(),
        "ce_loss": last.map(|r| r.ce_loss),
        "val_mse": last.and_then(|r| r.val_mse),
    }))
}

fn policy<'a>(kind: PolicyKind, checkpoint: Option<&'a ModelCheckpoint>) -> Result<Box<dyn ActionPolicy + 'a>> {
    Ok(match kind {
        PolicyKind::Model => {
            let c = checkpoint.context("--checkpoint is required with --policy model")?;
            Box::new(CheckpointPolicy::new(c, "model")?)
        }
        PolicyKind::Expert => Box::new(ExpertPolicy),
        PolicyKind::Zero => Box::new(ZeroPolicy),
    })
}

fn rollout(a: &Rollout) -> Result<Value> {
    let ds = open_dataset(&a.data)?;
    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let p = policy(a.policy, ckpt.as_ref())?;
    let body = BodyModel::biped();
    let lib = behaviors(&a.extra)?;
    let opts = CompletionOptions {
        cap: a.cap,
        ..CompletionOptions::for_model(&body)
    };
    let rows = batch_evaluate(p.as_ref(), &ds, a.split, &body, &lib, opts)?;
    let f = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_table(&rows, f)?;
    let mean = rows.iter().map(|r| r.episode_length).sum::<f64>() / rows.len().max(1) as f64;
    Ok(json!({
        "table": a.out,
        "episodes": rows.len(),
        "falls": rows.iter().filter(|r| r.terminated_by_fall).count(),
        "mean_length": mean,
    }))
}

fn evaluate(a: &Evaluate, seed: u64) -> Result<Value> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let extractor = load_checkpoint(&a.extractor)?;
    let ds = open_dataset(&a.data)?;
    let body = BodyModel::biped();
    let lib = behaviors(&a.extra)?;
    let name = match &a.name {
        Some(n) => n.clone(),
        None => a.checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
    };
    let setup = EvalSetup {
        extractor: &extractor,
        dataset: &ds,
        splits: &a.split,
        cap: a.cap,
        seed,
        body: &body,
        behaviors: &lib,
    };
    let eval = harness::evaluate(&ckpt, &name, &setup)?;
    harness::write_evaluation(&eval, &a.out, &name)?;
    Ok(serde_json::to_value(&eval.report)?)
}

fn ablation(a: &Ablation, seed: u64) -> Result<Value> {
    let pretrained = load_checkpoint(&a.checkpoint)?;
    let ds = open_dataset(&a.data)?;
    let config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => TrainConfig::for_phase(TrainPhase::Finetune),
    };
    let seeds = if a.seeds.is_empty() { vec![seed] } else { a.seeds.clone() };
    let curve = harness::run_ablation(&AblationSetup {
        pretrained: &pretrained,
        dataset: &ds,
        fractions: &a.fractions,
        seeds: &seeds,
        config: &config,
        cap: a.cap,
        output: &a.out,
    })?;
    Ok(serde_json::to_value(&curve)?)
}

fn render(a: &Render) -> Result<Value> {
    let ds = open_dataset(&a.data)?;
    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let p = policy(a.policy, ckpt.as_ref())?;
    let body = BodyModel::biped();
    let lib = behaviors(&a.extra)?;
    let prompt = MotionPrompt::from_dataset(&ds, &a.episode, &body, &lib)?;
    let behavior = lib
        .iter()
        .find(|b| b.name == prompt.behavior)
        .with_context(|| format!("unknown behavior `{}`", prompt.behavior))?;
    let opts = CompletionOptions {
        cap: a.cap,
        ..CompletionOptions::for_model(&body)
    };
    let ep = motion_completion(p.as_ref(), &prompt, &body, behavior, opts)?;
    let reference = replay_reference(&ds, &a.episode, &body, &lib)?;
    let svg = render_episode(&ep, &prompt, Some(&reference), &body)?;
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(json!({
        "svg": a.out,
        "episode": a.episode,
        "generation_steps": ep.episode_length,
        "terminated_by_fall": ep.terminated_by_fall,
    }))
}
