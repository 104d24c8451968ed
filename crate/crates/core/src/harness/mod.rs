//! Experiment orchestration: the model matrix over seeds and the
//! dataset-size ablation.
//!
//! A cell (variant × seed) is keyed by a hash of everything that feeds it.
//! Finished cells leave an empty stamp file named by that key and are
//! reloaded from disk on rerun.
//!
//! Output layout under the plan's output directory:
//!
//! ```text
//! checkpoints/  pretrained.hmgw, <variant>-s<seed>.hmgw
//! logs/         training logs as CSV
//! reports/      per-cell JSON/CSV reports, episode tables, summary.json
//! figures/      SVG box plots, histograms, ablation curve
//! stamps/       one empty file per completed cell
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{check_name, make_fraction, Dataset, DatasetError, Split};
use crate::experts::{build_dataset, library, BehaviorSpec, ExpertError, DEFAULT_NOISE};
use crate::gptcore::{self, GptError, ModelCheckpoint, Phase};
use crate::metrics::{
    ade, box_plot_svg, div, div_samples, durability_compare, episode_length_stats, extract_features, fde, fid,
    histogram_svg, line_plot_svg, mean_by_behavior, BehaviorScores, Durability, MetricsError, MetricsReport, Score,
    Series, TrajectoryPair, DURABILITY_THRESHOLD, HISTOGRAM_MAX,
};
use crate::physim::{joint_pose, BodyModel};
use crate::rollout::{
    batch_generate, write_table, CheckpointPolicy, CompletionOptions, EvalRow, GeneratedEpisode, RolloutError,
    GENERATION_CAP, PROMPT_STEPS,
};
use crate::trainer::{finetune, pretrain, train_scratch, TrainConfig, TrainError, TrainLog, TrainPhase};

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("dataset `{name}` unavailable at {path}: {source}")]
    MissingDataset {
        name: String,
        path: PathBuf,
        #[source]
        source: DatasetError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Model(#[from] GptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
}

fn plan_err<T>(msg: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::Plan(msg.into()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    /// Fine-tune the shared pretrained model with a fresh action head.
    PretrainFinetune,
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub mode: TrainingMode,
    /// Key into [`ExperimentPlan::datasets`].
    pub dataset: String,
    /// Stratified share of the train split; absent means all of it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
}

impl Variant {
    pub fn new(name: &str, mode: TrainingMode, dataset: &str) -> Self {
        Self {
            name: name.into(),
            mode,
            dataset: dataset.into(),
            fraction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub version: u32,
    /// Named dataset directories.
    pub datasets: BTreeMap<String, PathBuf>,
    /// Dataset the shared observation model is pre-trained on.
    pub pretrain_dataset: String,
    /// Dataset whose episodes prompt every variant's evaluation.
    pub eval_dataset: String,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Evaluation splits; the first carries the headline scores.
    pub splits: Vec<Split>,
    pub output: PathBuf,
    /// Generation steps per episode.
    pub cap: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub scratch: TrainConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            version: PLAN_VERSION,
            datasets: [("large", "data/large"), ("small", "data/small")]
                .into_iter()
                .map(|(k, v)| (k.to_string(), PathBuf::from(v)))
                .collect(),
            pretrain_dataset: "large".into(),
            eval_dataset: "small".into(),
            variants: vec![
                Variant::new("hmg", TrainingMode::PretrainFinetune, "small"),
                Variant::new("scratch-large", TrainingMode::Scratch, "large"),
                Variant::new("scratch-small", TrainingMode::Scratch, "small"),
            ],
            seeds: (0..5).collect(),
            splits: vec![Split::Validation, Split::Train],
            output: PathBuf::from("runs/matrix"),
            cap: GENERATION_CAP,
            pretrain: TrainConfig::for_phase(TrainPhase::Pretrain),
            finetune: TrainConfig::for_phase(TrainPhase::Finetune),
            scratch: TrainConfig::for_phase(TrainPhase::Scratch),
        }
    }
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Plan(e.to_string()))
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        serde_json::from_slice(bytes).map_err(|e| HarnessError::Plan(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_json_bytes(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Checks everything that does not need the datasets.
    pub fn check(&self) -> Result<(), HarnessError> {
        if self.version != PLAN_VERSION {
            return plan_err(format!("unsupported plan version {}", self.version));
        }
        if self.variants.is_empty() {
            return plan_err("no variants");
        }
        let mut names = BTreeSet::new();
        for v in &self.variants {
            check_name(&v.name).map_err(|e| HarnessError::Plan(e.to_string()))?;
            if !names.insert(v.name.as_str()) {
                return plan_err(format!("variant `{}` listed twice", v.name));
            }
            if !self.datasets.contains_key(&v.dataset) {
                return plan_err(format!("variant `{}` refers to unknown dataset `{}`", v.name, v.dataset));
            }
            if let Some(f) = v.fraction {
                check_fraction(f)?;
            }
        }
        if !self.datasets.contains_key(&self.pretrain_dataset) {
            return plan_err(format!("unknown pretraining dataset `{}`", self.pretrain_dataset));
        }
        if !self.datasets.contains_key(&self.eval_dataset) {
            return plan_err(format!("unknown evaluation dataset `{}`", self.eval_dataset));
        }
        if self.seeds.is_empty() {
            return plan_err("no seeds");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return plan_err("seeds repeat");
        }
        if self.splits.is_empty() || self.splits.iter().collect::<BTreeSet<_>>().len() != self.splits.len() {
            return plan_err("splits must be a non-empty list without repeats");
        }
        if self.cap == 0 {
            return plan_err("cap must be positive");
        }
        for (cfg, phase) in [
            (&self.pretrain, TrainPhase::Pretrain),
            (&self.finetune, TrainPhase::Finetune),
            (&self.scratch, TrainPhase::Scratch),
        ] {
            if cfg.phase != phase {
                return plan_err(format!("{phase:?} section has phase {:?}", cfg.phase));
            }
            cfg.validate().map_err(|e| HarnessError::Plan(format!("{phase:?} config: {e}")))?;
        }
        if self.finetune.window > self.pretrain.arch.context {
            return plan_err("fine-tune window exceeds the pretrained context");
        }
        Ok(())
    }

    /// Full validation: opens every referenced dataset.
    pub fn open(&self) -> Result<BTreeMap<String, Dataset>, HarnessError> {
        self.check()?;
        let mut used: BTreeSet<&str> = self.variants.iter().map(|v| v.dataset.as_str()).collect();
        used.insert(&self.pretrain_dataset);
        used.insert(&self.eval_dataset);
        let mut out = BTreeMap::new();
        for name in used {
            let path = &self.datasets[name];
            let ds = Dataset::open(path).map_err(|source| HarnessError::MissingDataset {
                name: name.into(),
                path: path.clone(),
                source,
            })?;
            out.insert(name.to_string(), ds);
        }
        let obs = out[&self.pretrain_dataset].manifest().obs_dim;
        for v in &self.variants {
            let m = out[&v.dataset].manifest();
            if m.act_dim == 0 {
                return plan_err(format!("variant `{}` needs actions; dataset `{}` has none", v.name, v.dataset));
            }
            if m.obs_dim != obs {
                return plan_err(format!("dataset `{}` observation width differs from the pretraining set", v.dataset));
            }
        }
        Ok(out)
    }
}

fn check_fraction(f: f64) -> Result<(), HarnessError> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(DatasetError::InvalidFraction(f).into())
    }
}

/// Directory layout of a run.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn create(root: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let l = Self {
            root: root.as_ref().to_path_buf(),
        };
        for d in [l.checkpoints(), l.logs(), l.reports(), l.figures(), l.stamps()] {
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        Ok(l)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn stamps(&self) -> PathBuf {
        self.root.join("stamps")
    }

    fn stamp(&self, key: &str) -> PathBuf {
        self.stamps().join(key)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn content_key(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Evaluation inputs shared by every cell.
#[derive(Clone, Copy)]
pub struct EvalSetup<'a> {
    pub extractor: &'a ModelCheckpoint,
    pub dataset: &'a Dataset,
    pub splits: &'a [Split],
    pub cap: usize,
    pub seed: u64,
    pub body: &'a BodyModel,
    pub behaviors: &'a [BehaviorSpec],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Episode table per evaluated split, in split order.
    pub rows: Vec<(Split, Vec<EvalRow>)>,
}

impl Evaluation {
    pub fn all_rows(&self) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().flat_map(|(_, r)| r.iter())
    }
}

struct Sample {
    behavior: String,
    generated: Option<Vec<f64>>,
    real: Option<Vec<f64>>,
    pair: Option<TrajectoryPair>,
}

fn sample(ep: &GeneratedEpisode, setup: &EvalSetup) -> Result<Sample, HarnessError> {
    let frames = setup.dataset.load_frames(&ep.episode_id)?;
    let real: Vec<Vec<f64>> = (PROMPT_STEPS..frames.len)
        .map(|t| frames.obs_row(t).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let generated = ep.generated_observations();
    let feature = |obs: &[Vec<f64>], tag: &str| -> Result<Option<Vec<f64>>, HarnessError> {
        if obs.is_empty() {
            return Ok(None);
        }
        let source = format!("{}:{tag}", ep.episode_id);
        Ok(Some(extract_features(setup.extractor, obs, &source)?.values))
    };
    let pose = |rows: &[Vec<f64>]| rows.iter().map(|o| joint_pose(o, setup.body)).collect::<Vec<_>>();
    let pair = (!generated.is_empty() && !real.is_empty()).then(|| TrajectoryPair {
        behavior: ep.behavior.clone(),
        generated: pose(generated),
        real: pose(&real),
    });
    Ok(Sample {
        behavior: ep.behavior.clone(),
        generated: feature(generated, "generated")?,
        real: feature(&real, "real")?,
        pair,
    })
}

fn scores(samples: &[&Sample]) -> (Score, Score, Score) {
    let gen: Vec<Vec<f64>> = samples.iter().filter_map(|s| s.generated.clone()).collect();
    let real: Vec<Vec<f64>> = samples.iter().filter_map(|s| s.real.clone()).collect();
    let pairs: Vec<TrajectoryPair> = samples.iter().filter_map(|s| s.pair.clone()).collect();
    (Score::of(fid(&real, &gen)), Score::of(ade(&pairs)), Score::of(fde(&pairs)))
}

/// Motion completion on every episode of the requested splits, then
/// FID/ADE/FDE/DIV on the first split and episode-length summaries on all.
pub fn evaluate(checkpoint: &ModelCheckpoint, model_name: &str, setup: &EvalSetup) -> Result<Evaluation, HarnessError> {
    let policy = CheckpointPolicy::new(checkpoint, model_name)?;
    let opts = CompletionOptions {
        cap: setup.cap,
        ..CompletionOptions::for_model(setup.body)
    };
    let mut rows = Vec::new();
    let mut lengths = BTreeMap::new();
    let mut samples: Vec<(Split, Sample)> = Vec::new();
    for &split in setup.splits {
        let eps = batch_generate(&policy, setup.dataset, split, setup.body, setup.behaviors, opts)?;
        let split_rows: Vec<EvalRow> = eps.iter().map(EvalRow::from).collect();
        let secs: Vec<f64> = split_rows.iter().map(|r| r.episode_length).collect();
        lengths.insert(split.name().to_string(), episode_length_stats(&secs)?);
        rows.push((split, split_rows));
        let s = eps.par_iter().map(|e| sample(e, setup)).collect::<Result<Vec<_>, _>>()?;
        samples.extend(s.into_iter().map(|x| (split, x)));
    }
    let head = setup.splits[0];
    let headline: Vec<&Sample> = samples.iter().filter(|(s, _)| *s == head).map(|(_, x)| x).collect();
    let (fid_score, ade_score, fde_score) = scores(&headline);
    let gen: Vec<Vec<f64>> = headline.iter().filter_map(|s| s.generated.clone()).collect();
    let real: Vec<Vec<f64>> = headline.iter().filter_map(|s| s.real.clone()).collect();

    let mut by_behavior: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
    for (_, s) in &samples {
        by_behavior.entry(&s.behavior).or_default().push(s);
    }
    let means = mean_by_behavior(rows.iter().flat_map(|(_, r)| r.iter()).map(|r| (r.behavior.as_str(), r.episode_length)));
    let per_behavior = by_behavior
        .into_iter()
        .map(|(b, group)| {
            let (fid, ade, fde) = scores(&group);
            BehaviorScores {
                behavior: b.into(),
                fid,
                ade,
                fde,
                mean_length: means[b],
            }
        })
        .collect();
    let report = MetricsReport {
        model: model_name.into(),
        checkpoint: sha256_hex(&gptcore::encode_checkpoint(checkpoint)),
        extractor: sha256_hex(&gptcore::encode_checkpoint(setup.extractor)),
        dataset: setup.dataset.manifest().id.clone(),
        seed: setup.seed,
        fid: fid_score,
        ade: ade_score,
        fde: fde_score,
        div: Score::of(div(&gen, div_samples(gen.len()), setup.seed)),
        real_div: Score::of(div(&real, div_samples(real.len()), setup.seed)),
        lengths,
        per_behavior,
    };
    Ok(Evaluation { report, rows })
}

fn episodes_path(dir: &Path, name: &str, split: Split) -> PathBuf {
    dir.join(format!("{name}-{split}-episodes.csv"))
}

/// Writes `<name>.json`, `<name>.csv` and one `<name>-<split>-episodes.csv`
/// per split into `dir`.
pub fn write_evaluation(eval: &Evaluation, dir: &Path, name: &str) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join(format!("{name}.json")), to_json(&eval.report))?;
    write(&dir.join(format!("{name}.csv")), eval.report.to_csv())?;
    for (split, rows) in &eval.rows {
        let mut table = Vec::new();
        write_table(rows, &mut table)?;
        write(&episodes_path(dir, name, *split), table)?;
    }
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<EvalRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Rollout(e.into()))?;
    r.deserialize()
        .collect::<Result<Vec<EvalRow>, _>>()
        .map_err(|e| HarnessError::Rollout(e.into()))
}

/// One trained and evaluated variant × seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub variant: String,
    pub seed: u64,
    pub key: String,
    pub report: MetricsReport,
    #[serde(skip)]
    pub rows: Vec<(Split, Vec<EvalRow>)>,
    /// False when loaded from a previous run.
    #[serde(skip)]
    pub trained: bool,
}

impl CellReport {
    /// Mean generation length on `split`, s.
    pub fn mean_length(&self, split: Split) -> Option<f64> {
        self.report.lengths.get(split.name()).map(|l| l.mean)
    }
}

struct Cell<'a> {
    variant: &'a Variant,
    seed: u64,
    dataset: &'a Dataset,
    eval_dataset: &'a Dataset,
    config: &'a TrainConfig,
    pretrained: &'a ModelCheckpoint,
    pretrained_key: &'a str,
    splits: &'a [Split],
    cap: usize,
}

#[derive(Serialize)]
struct CellKey<'a> {
    kind: &'static str,
    version: &'static str,
    variant: &'a Variant,
    seed: u64,
    dataset: String,
    eval_dataset: String,
    config: &'a TrainConfig,
    pretrained: &'a str,
    splits: &'a [Split],
    cap: usize,
}

fn cell_name(variant: &str, seed: u64) -> String {
    format!("{variant}-s{seed}")
}

fn run_cell(cell: &Cell, layout: &Layout, body: &BodyModel, behaviors: &[BehaviorSpec]) -> Result<CellReport, HarnessError> {
    let mut config = cell.config.clone();
    config.seed = cell.seed;
    let key = content_key(&CellKey {
        kind: "cell",
        version: env!("CARGO_PKG_VERSION"),
        variant: cell.variant,
        seed: cell.seed,
        dataset: sha256_hex(cell.dataset.manifest().to_json().as_bytes()),
        eval_dataset: sha256_hex(cell.eval_dataset.manifest().to_json().as_bytes()),
        config: &config,
        pretrained: cell.pretrained_key,
        splits: cell.splits,
        cap: cell.cap,
    });
    let name = cell_name(&cell.variant.name, cell.seed);
    let report_path = layout.reports().join(format!("{name}.json"));
    let tables: Vec<PathBuf> = cell.splits.iter().map(|&s| episodes_path(&layout.reports(), &name, s)).collect();
    if layout.stamp(&key).exists() && report_path.exists() && tables.iter().all(|p| p.exists()) {
        log::info!("{name}: up to date");
        let rows = cell
            .splits
            .iter()
            .zip(&tables)
            .map(|(&s, p)| Ok((s, read_rows(p)?)))
            .collect::<Result<Vec<_>, HarnessError>>()?;
        return Ok(CellReport {
            variant: cell.variant.name.clone(),
            seed: cell.seed,
            key,
            report: read_json(&report_path)?,
            rows,
            trained: false,
        });
    }
    log::info!("{name}: training {} steps", config.steps);
    let fraction = match cell.variant.fraction.filter(|&f| f < 1.0) {
        Some(f) => Some(make_fraction(cell.dataset.manifest(), f, cell.seed)?),
        None => None,
    };
    let (checkpoint, log) = match cell.variant.mode {
        TrainingMode::PretrainFinetune => finetune(cell.pretrained, cell.dataset, fraction.as_ref(), &config)?,
        TrainingMode::Scratch => train_scratch(cell.dataset, fraction.as_ref(), &config)?,
    };
    save_model(&checkpoint, &log, layout, &name)?;
    log::info!("{name}: evaluating");
    let setup = EvalSetup {
        extractor: cell.pretrained,
        dataset: cell.eval_dataset,
        splits: cell.splits,
        cap: cell.cap,
        seed: cell.seed,
        body,
        behaviors,
    };
    let eval = evaluate(&checkpoint, &cell.variant.name, &setup)?;
    write_evaluation(&eval, &layout.reports(), &name)?;
    write(&layout.stamp(&key), "")?;
    Ok(CellReport {
        variant: cell.variant.name.clone(),
        seed: cell.seed,
        key,
        report: eval.report,
        rows: eval.rows,
        trained: true,
    })
}

fn save_model(c: &ModelCheckpoint, log: &TrainLog, layout: &Layout, name: &str) -> Result<(), HarnessError> {
    let path = layout.checkpoints().join(format!("{name}.hmgw"));
    write(&path, gptcore::encode_checkpoint(c))?;
    log.save_csv(&layout.logs().join(format!("{name}.csv")))?;
    Ok(())
}

/// Pre-trains the shared observation model, or reloads it when its stamp
/// matches.
pub fn ensure_pretrained(
    dataset: &Dataset,
    config: &TrainConfig,
    layout: &Layout,
) -> Result<(ModelCheckpoint, String), HarnessError> {
    #[derive(Serialize)]
    struct Key<'a> {
        kind: &'static str,
        version: &'static str,
        dataset: String,
        config: &'a TrainConfig,
    }
    let key = content_key(&Key {
        kind: "pretrain",
        version: env!("CARGO_PKG_VERSION"),
        dataset: sha256_hex(dataset.manifest().to_json().as_bytes()),
        config,
    });
    let path = layout.checkpoints().join("pretrained.hmgw");
    let model = if layout.stamp(&key).exists() && path.exists() {
        log::info!("pretrained: up to date");
        gptcore::load(&path)?
    } else {
        log::info!("pretrained: training {} steps", config.steps);
        let (c, log) = pretrain(dataset, config)?;
        save_model(&c, &log, layout, "pretrained")?;
        write(&layout.stamp(&key), "")?;
        c
    };
    let hash = sha256_hex(&gptcore::encode_checkpoint(&model));
    Ok((model, hash))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mode: TrainingMode,
    pub seeds: Vec<u64>,
    /// Over per-seed means on the headline split.
    pub mean_length: Option<Spread>,
    pub fid: Option<Spread>,
    pub ade: Option<Spread>,
    pub fde: Option<Spread>,
    pub div: Option<Spread>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurabilityRow {
    pub a: String,
    pub b: String,
    pub result: Durability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixOutcome {
    pub cells: Vec<CellReport>,
    pub variants: Vec<VariantSummary>,
    /// Every variant pair, over behavior means pooled across seeds and
    /// splits.
    pub durability: Vec<DurabilityRow>,
}

impl MatrixOutcome {
    pub fn cells_of<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a CellReport> + 'a {
        self.cells.iter().filter(move |c| c.variant == variant)
    }

    pub fn trained(&self) -> usize {
        self.cells.iter().filter(|c| c.trained).count()
    }
}

/// Trains and evaluates every variant × seed of `plan`. Fails before any
/// training when the plan or a dataset is unusable.
pub fn run_matrix(plan: &ExperimentPlan) -> Result<MatrixOutcome, HarnessError> {
    let datasets = plan.open()?;
    let layout = Layout::create(&plan.output)?;
    write(&layout.root.join("plan.json"), plan.to_json())?;
    let body = BodyModel::biped();
    let behaviors = library();
    let (pretrained, pretrained_key) = ensure_pretrained(&datasets[&plan.pretrain_dataset], &plan.pretrain, &layout)?;

    let mut cells = Vec::new();
    for v in &plan.variants {
        let config = match v.mode {
            TrainingMode::PretrainFinetune => &plan.finetune,
            TrainingMode::Scratch => &plan.scratch,
        };
        for &seed in &plan.seeds {
            let cell = Cell {
                variant: v,
                seed,
                dataset: &datasets[&v.dataset],
                eval_dataset: &datasets[&plan.eval_dataset],
                config,
                pretrained: &pretrained,
                pretrained_key: &pretrained_key,
                splits: &plan.splits,
                cap: plan.cap,
            };
            cells.push(run_cell(&cell, &layout, &body, &behaviors)?);
        }
    }

    let head = plan.splits[0];
    let variants: Vec<VariantSummary> = plan
        .variants
        .iter()
        .map(|v| {
            let mine: Vec<&CellReport> = cells.iter().filter(|c| c.variant == v.name).collect();
            let spread = |f: &dyn Fn(&CellReport) -> Option<f64>| Spread::of(&mine.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
            VariantSummary {
                variant: v.name.clone(),
                mode: v.mode,
                seeds: mine.iter().map(|c| c.seed).collect(),
                mean_length: spread(&|c| c.mean_length(head)),
                fid: spread(&|c| c.report.fid.value()),
                ade: spread(&|c| c.report.ade.value()),
                fde: spread(&|c| c.report.fde.value()),
                div: spread(&|c| c.report.div.value()),
            }
        })
        .collect();

    let pooled: BTreeMap<&str, BTreeMap<String, f64>> = plan
        .variants
        .iter()
        .map(|v| {
            let rows = cells
                .iter()
                .filter(|c| c.variant == v.name)
                .flat_map(|c| c.rows.iter().flat_map(|(_, r)| r.iter()))
                .map(|r| (r.behavior.as_str(), r.episode_length));
            (v.name.as_str(), mean_by_behavior(rows))
        })
        .collect();
    let mut durability = Vec::new();
    for (i, a) in plan.variants.iter().enumerate() {
        for b in &plan.variants[i + 1..] {
            durability.push(DurabilityRow {
                a: a.name.clone(),
                b: b.name.clone(),
                result: durability_compare(&pooled[a.name.as_str()], &pooled[b.name.as_str()], DURABILITY_THRESHOLD)?,
            });
        }
    }

    let outcome = MatrixOutcome {
        cells,
        variants,
        durability,
    };
    write(&layout.reports().join("summary.json"), to_json(&outcome))?;
    write_figures(&outcome, &plan.splits, &layout)?;
    Ok(outcome)
}

fn write_figures(outcome: &MatrixOutcome, splits: &[Split], layout: &Layout) -> Result<(), HarnessError> {
    let names: Vec<&str> = outcome.variants.iter().map(|v| v.variant.as_str()).collect();
    for &split in splits {
        let mut boxes = Vec::new();
        let mut hists = Vec::new();
        for &n in &names {
            let lengths: Vec<f64> = outcome
                .cells_of(n)
                .flat_map(|c| c.rows.iter().filter(|(s, _)| *s == split).flat_map(|(_, r)| r.iter()))
                .map(|r| r.episode_length)
                .collect();
            if lengths.is_empty() {
                continue;
            }
            let st = episode_length_stats(&lengths)?;
            boxes.push((n.to_string(), st.summary));
            hists.push((n.to_string(), st.histogram));
        }
        let title = format!("Episode length ({split})");
        write(
            &layout.figures().join(format!("lengths-{split}.svg")),
            box_plot_svg(&boxes, HISTOGRAM_MAX, "seconds", &title),
        )?;
        write(
            &layout.figures().join(format!("histogram-{split}.svg")),
            histogram_svg(&hists, "seconds", &title),
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub fraction: f64,
    /// Mean over seeds of the validation mean episode length, s.
    pub mean_length: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub dataset: String,
    pub points: Vec<AblationPoint>,
}

pub struct AblationSetup<'a> {
    pub pretrained: &'a ModelCheckpoint,
    pub dataset: &'a Dataset,
    pub fractions: &'a [f64],
    pub seeds: &'a [u64],
    pub config: &'a TrainConfig,
    pub cap: usize,
    pub output: &'a Path,
}

/// Fine-tunes on each fraction of the train split per seed and records the
/// validation episode length. Cells are shared with [`run_matrix`] naming
/// (`hmg-f<fraction>-s<seed>`) and are resumable the same way.
pub fn run_ablation(setup: &AblationSetup) -> Result<AblationCurve, HarnessError> {
    let p = setup.pretrained;
    if p.provenance.phase != Phase::Pretrained {
        return plan_err("ablation needs a pretrained observation model");
    }
    if setup.fractions.is_empty() || setup.seeds.is_empty() {
        return plan_err("ablation needs at least one fraction and one seed");
    }
    for &f in setup.fractions {
        check_fraction(f)?;
    }
    let mut fractions = setup.fractions.to_vec();
    fractions.sort_by(f64::total_cmp);
    if fractions.windows(2).any(|w| w[0] == w[1]) {
        return plan_err("fractions repeat");
    }
    if setup.config.phase != TrainPhase::Finetune {
        return plan_err("ablation config must be a fine-tune config");
    }
    setup.config.validate()?;
    if setup.dataset.manifest().act_dim == 0 {
        return plan_err("ablation dataset has no actions");
    }
    let layout = Layout::create(setup.output)?;
    let body = BodyModel::biped();
    let behaviors = library();
    let pretrained_key = sha256_hex(&gptcore::encode_checkpoint(p));
    let splits = [Split::Validation];
    let mut points = Vec::new();
    for &fraction in &fractions {
        let variant = Variant {
            name: format!("hmg-f{fraction}"),
            mode: TrainingMode::PretrainFinetune,
            dataset: setup.dataset.manifest().id.clone(),
            fraction: Some(fraction),
        };
        let mut per_seed = Vec::new();
        for &seed in setup.seeds {
            let cell = Cell {
                variant: &variant,
                seed,
                dataset: setup.dataset,
                eval_dataset: setup.dataset,
                config: setup.config,
                pretrained: p,
                pretrained_key: &pretrained_key,
                splits: &splits,
                cap: setup.cap,
            };
            let r = run_cell(&cell, &layout, &body, &behaviors)?;
            per_seed.push(r.mean_length(Split::Validation).expect("validation evaluated"));
        }
        points.push(AblationPoint {
            fraction,
            mean_length: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
            per_seed,
        });
    }
    let curve = AblationCurve {
        dataset: setup.dataset.manifest().id.clone(),
        points,
    };
    write(&layout.reports().join("ablation.json"), to_json(&curve))?;
    let series = Series {
        name: "fine-tuned".into(),
        points: curve.points.iter().map(|p| (p.fraction, p.mean_length)).collect(),
    };
    write(
        &layout.figures().join("ablation.svg"),
        line_plot_svg(&[series], "dataset fraction", "mean episode length (s)", "Performance by dataset size"),
    )?;
    Ok(curve)
}

/// Behaviors, rollout counts and budgets of the demo preset.
pub const DEMO_BEHAVIORS: [&str; 2] = ["stand", "walk-forward"];
pub const DEMO_LARGE_ROLLOUTS: usize = 10;
pub const DEMO_SMALL_ROLLOUTS: usize = 3;
pub const DEMO_STEPS: u64 = 2_000;
pub const DEMO_FINETUNE_STEPS: u64 = 400;
pub const DEMO_FRACTIONS: [f64; 3] = [1.0, 0.5, 0.25];

fn demo_config(phase: TrainPhase, steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 8,
        lr: 1e-3,
        timed: false,
        arch: crate::trainer::Arch {
            context: 32,
            embed: 32,
            layers: 2,
            heads: 2,
            bins: 32,
            dropout: 0.0,
        },
        ..TrainConfig::for_phase(phase)
    }
}

/// Demo plan over `root/data/{large,small}` writing to `root/run`.
pub fn demo_plan(root: &Path, seed: u64) -> ExperimentPlan {
    let mut pretrain = demo_config(TrainPhase::Pretrain, DEMO_STEPS);
    pretrain.seed = seed;
    ExperimentPlan {
        datasets: [("large", root.join("data/large")), ("small", root.join("data/small"))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        seeds: vec![seed],
        output: root.join("run"),
        pretrain,
        finetune: demo_config(TrainPhase::Finetune, DEMO_FINETUNE_STEPS),
        scratch: demo_config(TrainPhase::Scratch, DEMO_STEPS),
        ..ExperimentPlan::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoOutcome {
    pub matrix: MatrixOutcome,
    pub ablation: AblationCurve,
}

/// The whole pipeline at micro scale: two datasets, pretraining, the three
/// matrix variants for one seed, and the fraction ablation.
pub fn run_demo(root: &Path, seed: u64) -> Result<DemoOutcome, HarnessError> {
    let body = BodyModel::biped();
    let behaviors: Vec<BehaviorSpec> = library()
        .into_iter()
        .filter(|b| DEMO_BEHAVIORS.contains(&b.name.as_str()))
        .collect();
    for (name, rollouts, offset) in [("large", DEMO_LARGE_ROLLOUTS, 0), ("small", DEMO_SMALL_ROLLOUTS, 1)] {
        let dir = root.join("data").join(name);
        if Dataset::open(&dir).is_err() {
            log::info!("demo: generating {name} dataset");
            build_dataset(&dir, name, &behaviors, rollouts, DEFAULT_NOISE, seed.wrapping_add(offset), &body)?;
        }
    }
    let plan = demo_plan(root, seed);
    let matrix = run_matrix(&plan)?;
    let datasets = plan.open()?;
    let pretrained = gptcore::load(plan.output.join("checkpoints/pretrained.hmgw"))?;
    let ablation = run_ablation(&AblationSetup {
        pretrained: &pretrained,
        dataset: &datasets["small"],
        fractions: &DEMO_FRACTIONS,
        seeds: &plan.seeds,
        config: &plan.finetune,
        cap: plan.cap,
        output: &plan.output,
    })?;
    Ok(DemoOutcome { matrix, ablation })
}

/// Rollouts per behavior of the compact preset's datasets.
pub const COMPACT_LARGE_ROLLOUTS: usize = 100;
pub const COMPACT_SMALL_ROLLOUTS: usize = 3;
pub const COMPACT_EVAL_ROLLOUTS: usize = 5;

fn compact_config(phase: TrainPhase, steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 8,
        lr: 1e-3,
        finetune_lr: Some(3e-4),
        arch: crate::trainer::Arch {
            context: 32,
            embed: 64,
            layers: 2,
            heads: 2,
            bins: 64,
            dropout: 0.0,
        },
        ..TrainConfig::for_phase(phase)
    }
}

/// Five-seed matrix sized for a single core: datasets `large`, `small` and
/// `eval` under `data_root`, evaluation on the validation split of `eval`.
pub fn compact_plan(data_root: &Path, output: &Path) -> ExperimentPlan {
    ExperimentPlan {
        datasets: ["large", "small", "eval"]
            .into_iter()
            .map(|k| (k.to_string(), data_root.join(k)))
            .collect(),
        eval_dataset: "eval".into(),
        splits: vec![Split::Validation],
        output: output.to_path_buf(),
        pretrain: compact_config(TrainPhase::Pretrain, 5_000),
        finetune: compact_config(TrainPhase::Finetune, 1_000),
        scratch: compact_config(TrainPhase::Scratch, 5_000),
        ..ExperimentPlan::default()
    }
}

/// Builds the compact preset's datasets under `data_root`, reusing any that
/// already open.
pub fn build_compact_datasets(data_root: &Path, seed: u64) -> Result<(), HarnessError> {
    let body = BodyModel::biped();
    let lib = library();
    for (i, (name, rollouts)) in [
        ("large", COMPACT_LARGE_ROLLOUTS),
        ("small", COMPACT_SMALL_ROLLOUTS),
        ("eval", COMPACT_EVAL_ROLLOUTS),
    ]
    .into_iter()
    .enumerate()
    {
        let dir = data_root.join(name);
        if Dataset::open(&dir).is_err() {
            log::info!("generating {name} dataset");
            build_dataset(&dir, name, &lib, rollouts, DEFAULT_NOISE, seed.wrapping_add(i as u64 + 1), &body)?;
        }
    }
    Ok(())
}
