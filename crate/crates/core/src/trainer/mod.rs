//! Pre-training, head-swapped fine-tuning and from-scratch training loops.
//!
//! All three loops share one optimizer: Adam with decoupled weight decay on
//! weight matrices, linear warmup over the first 5% of the budget, cosine
//! decay to 10% of the peak rate, and global-norm gradient clipping.

mod data;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError, DatasetFraction, Split};
use crate::gptcore::{
    Decode, Discretizer, GptError, HeadKind, InputNorm, LossKind, Mode, ModelCheckpoint, ModelConfig, Phase, Provenance,
    Trainable, Weights,
};

pub use data::{EpisodePairs, Pairs, Selection, Targets};

/// Cosine decay ends at this fraction of the peak learning rate.
pub const MIN_LR_RATIO: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] GptError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("dataset `{0}` stores no actions")]
    NoActions(String),
    #[error("no usable training episodes")]
    NoEpisodes,
    #[error("diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },
    #[error("log: {0}")]
    Log(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Pretrain,
    Finetune,
    Scratch,
}

/// Architecture knobs; input and output widths come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub context: usize,
    pub embed: usize,
    pub layers: usize,
    pub heads: usize,
    pub bins: usize,
    pub dropout: f64,
}

impl Arch {
    pub fn desk() -> Self {
        let c = ModelConfig::desk(1, 1, HeadKind::Observation);
        Self {
            context: c.context,
            embed: c.embed,
            layers: c.layers,
            heads: c.heads,
            bins: c.bins,
            dropout: c.dropout,
        }
    }

    pub fn model(&self, input_dim: usize, output_dim: usize, head: HeadKind) -> ModelConfig {
        ModelConfig {
            context: self.context,
            embed: self.embed,
            layers: self.layers,
            heads: self.heads,
            bins: self.bins,
            input_dim,
            output_dim,
            head,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: TrainPhase,
    pub steps: u64,
    pub batch: usize,
    /// Steps per training window; at most the context length.
    pub window: usize,
    /// Peak rate for pretraining and scratch training.
    pub lr: f64,
    /// Fine-tune rate as a fraction of `lr`.
    pub finetune_lr_ratio: f64,
    /// Absolute fine-tune rate; overrides the ratio.
    pub finetune_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    /// Fine-tune the output head only.
    pub frozen: bool,
    pub loss: LossKind,
    /// Steps between log records; the last step is always logged.
    pub log_interval: u64,
    /// Validation every this many steps; 0 validates only at the end.
    pub val_interval: u64,
    /// Decode used for validation MSE.
    pub decode: Decode,
    pub arch: Arch,
    pub seed: u64,
    /// Record wall time in the log; off gives byte-identical logs.
    pub timed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: TrainPhase::Pretrain,
            steps: 20_000,
            batch: 16,
            window: 32,
            lr: 3e-4,
            finetune_lr_ratio: 0.01,
            finetune_lr: None,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_frac: 0.05,
            grad_clip: 1.0,
            frozen: false,
            loss: LossKind::CrossEntropy,
            log_interval: 100,
            val_interval: 0,
            decode: Decode::Argmax,
            arch: Arch::desk(),
            seed: 0,
            timed: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for `phase`; fine-tuning gets a fifth of the pretraining
    /// budget.
    pub fn for_phase(phase: TrainPhase) -> Self {
        let base = Self::default();
        let steps = if phase == TrainPhase::Finetune { base.steps / 5 } else { base.steps };
        Self { phase, steps, ..base }
    }

    /// Peak learning rate for this phase.
    pub fn peak_lr(&self) -> f64 {
        match self.phase {
            TrainPhase::Finetune => self.finetune_lr.unwrap_or(self.lr * self.finetune_lr_ratio),
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.steps == 0 {
            return bad("step budget must be at least 1");
        }
        if self.batch == 0 || self.window == 0 {
            return bad("batch and window must be positive");
        }
        if self.window > self.arch.context {
            return bad("window longer than the context");
        }
        let lr = self.peak_lr();
        if !(lr.is_finite() && lr > 0.0 && self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return bad("eps and clip must be positive, weight decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup fraction must lie in [0, 1]");
        }
        if self.log_interval == 0 {
            return bad("log interval must be positive");
        }
        Ok(())
    }

    /// Learning rate at zero-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let peak = self.peak_lr();
        let warm = ((self.warmup_frac * self.steps as f64).ceil() as u64).min(self.steps);
        if step < warm {
            return peak * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        let floor = peak * MIN_LR_RATIO;
        floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    /// Mean training loss per output dimension since the previous record.
    pub ce_loss: f64,
    pub val_mse: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    /// CSV with header `step,ce_loss,val_mse,lr,seconds`; a missing
    /// validation value is an empty cell.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        let file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(file)
    }
}

/// Observation-only next-step pretraining on the train split.
pub fn pretrain(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelCheckpoint, TrainLog), TrainError> {
    expect_phase(config, TrainPhase::Pretrain)?;
    config.validate()?;
    let m = dataset.manifest();
    let stats = data::stats(dataset)?;
    let model = ModelCheckpoint::init(
        config.arch.model(m.obs_dim, m.obs_dim, HeadKind::Observation),
        InputNorm::from_stats(&stats.obs),
        Discretizer::from_stats(&stats.obs, config.arch.bins)?,
        provenance(dataset, config, Phase::Pretrained),
        config.seed,
    )?;
    let train = Selection::split(dataset, Split::Train).load(Targets::NextObservation)?;
    let val = Selection::split(dataset, Split::Validation).load(Targets::NextObservation)?;
    run(model, &train, &val, config, Trainable::All)
}

/// Swaps the head of `source` for an action head and trains on `fraction`
/// (or the full train split) at the reduced fine-tune rate.
pub fn finetune(
    source: &ModelCheckpoint,
    dataset: &Dataset,
    fraction: Option<&DatasetFraction>,
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainLog), TrainError> {
    expect_phase(config, TrainPhase::Finetune)?;
    config.validate()?;
    require_actions(dataset)?;
    if source.config.input_dim != dataset.manifest().obs_dim {
        return Err(GptError::Shape {
            what: "observation width".into(),
            expected: source.config.input_dim,
            got: dataset.manifest().obs_dim,
        }
        .into());
    }
    if config.window > source.config.context {
        return Err(TrainError::Config("window longer than the source context".into()));
    }
    let stats = data::stats(dataset)?;
    let mut model = source.swap_head(&stats.act, config.seed ^ 0x5eed_4ead)?;
    model.provenance = provenance(dataset, config, Phase::Finetuned);
    let train = match fraction {
        Some(f) => Selection::fraction(dataset, f)?,
        None => Selection::split(dataset, Split::Train),
    }
    .load(Targets::Action)?;
    let val = Selection::split(dataset, Split::Validation).load(Targets::Action)?;
    let trainable = if config.frozen { Trainable::HeadOnly } else { Trainable::All };
    run(model, &train, &val, config, trainable)
}

/// Action prediction from random initialization.
pub fn train_scratch(
    dataset: &Dataset,
    fraction: Option<&DatasetFraction>,
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainLog), TrainError> {
    expect_phase(config, TrainPhase::Scratch)?;
    config.validate()?;
    require_actions(dataset)?;
    let m = dataset.manifest();
    let stats = data::stats(dataset)?;
    let model = ModelCheckpoint::init(
        config.arch.model(m.obs_dim, m.act_dim, HeadKind::Action),
        InputNorm::from_stats(&stats.obs),
        Discretizer::from_stats(&stats.act, config.arch.bins)?,
        provenance(dataset, config, Phase::Scratch),
        config.seed,
    )?;
    let train = match fraction {
        Some(f) => Selection::fraction(dataset, f)?,
        None => Selection::split(dataset, Split::Train),
    }
    .load(Targets::Action)?;
    let val = Selection::split(dataset, Split::Validation).load(Targets::Action)?;
    run(model, &train, &val, config, Trainable::All)
}

/// Mean squared error between decoded predictions and the continuous
/// targets, over every dimension of every target step. Episodes are cut
/// into consecutive windows of the model's context length.
pub fn validate(model: &ModelCheckpoint, pairs: &Pairs, decode: Decode) -> Result<f64, TrainError> {
    let (c, dout) = (model.config.context, model.config.output_dim);
    if pairs.output_dim() != dout || pairs.input_dim() != model.config.input_dim {
        return Err(GptError::Shape {
            what: "validation pair widths".into(),
            expected: dout,
            got: pairs.output_dim(),
        }
        .into());
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ep in pairs.episodes() {
        let mut start = 0;
        while start < ep.len() {
            let steps = c.min(ep.len() - start);
            let inputs = ep.inputs(start, steps);
            let tr = model.forward_batch(inputs, 1, steps, Mode::Eval)?;
            let width = model.config.head_width();
            for (t, logits) in tr.logits.chunks_exact(width).enumerate() {
                let pred = model.decode_step(logits, decode);
                let truth = ep.target_values(start + t);
                sum += pred.iter().zip(truth).map(|(p, y)| (p - f64::from(*y)).powi(2)).sum::<f64>();
                count += dout;
            }
            start += steps;
        }
    }
    if count == 0 {
        return Err(DatasetError::EmptyTrainSplit.into());
    }
    Ok(sum / count as f64)
}

fn expect_phase(config: &TrainConfig, phase: TrainPhase) -> Result<(), TrainError> {
    if config.phase == phase {
        Ok(())
    } else {
        Err(TrainError::Config(format!("config is for {:?}, not {phase:?}", config.phase)))
    }
}

fn require_actions(dataset: &Dataset) -> Result<(), TrainError> {
    let m = dataset.manifest();
    if m.act_dim == 0 {
        Err(TrainError::NoActions(m.id.clone()))
    } else {
        Ok(())
    }
}

fn provenance(dataset: &Dataset, config: &TrainConfig, phase: Phase) -> Provenance {
    Provenance {
        dataset: dataset.manifest().id.clone(),
        steps: config.steps,
        phase,
    }
}

/// Adam with decoupled weight decay on [`TensorSpec::decayed`] tensors.
/// Frozen tensors are skipped entirely.
///
/// [`TensorSpec::decayed`]: crate::gptcore::TensorSpec::decayed
pub struct Adam {
    m: Weights,
    v: Weights,
    decayed: Vec<bool>,
    trainable: Vec<bool>,
}

impl Adam {
    pub fn new(model: &ModelCheckpoint, trainable: Trainable) -> Self {
        let specs = model.config.tensor_specs();
        Self {
            m: model.weights.zeros_like(),
            v: model.weights.zeros_like(),
            decayed: specs.iter().map(|s| s.decayed()).collect(),
            trainable: specs.iter().map(|s| trainable == Trainable::All || !s.backbone).collect(),
        }
    }

    /// One update at one-based step `t`.
    pub fn step(&mut self, weights: &mut Weights, grads: &Weights, lr: f64, t: u64, c: &TrainConfig) {
        let gs = grads.tensors();
        let norm = gs
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &on)| on)
            .flat_map(|(g, _)| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > c.grad_clip { c.grad_clip / norm } else { 1.0 };
        let bc1 = 1.0 - c.beta1.powf(t as f64);
        let bc2 = 1.0 - c.beta2.powf(t as f64);
        let ws = weights.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (i, (((w, g), m), v)) in ws.into_iter().zip(gs).zip(ms).zip(vs).enumerate() {
            if !self.trainable[i] {
                continue;
            }
            let wd = if self.decayed[i] { c.weight_decay } else { 0.0 };
            for j in 0..w.len() {
                let gj = g[j] * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                w[j] -= lr * (update + wd * w[j]);
            }
        }
    }
}

fn run(
    mut model: ModelCheckpoint,
    train: &Pairs,
    val: &Pairs,
    config: &TrainConfig,
    trainable: Trainable,
) -> Result<(ModelCheckpoint, TrainLog), TrainError> {
    if train.is_empty() {
        return Err(TrainError::NoEpisodes);
    }
    let clock = Instant::now();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed);
    drop_rng.set_stream(2);
    let mut adam = Adam::new(&model, trainable);
    let mut log = TrainLog::default();
    let (mut acc, mut acc_n) = (0.0, 0usize);
    let dout = model.config.output_dim as f64;
    for step in 0..config.steps {
        let batch = train.sample(&model.discretizer, config.batch, config.window, &mut sample_rng);
        let tr = model.forward_batch(&batch.inputs, config.batch, config.window, Mode::Train(&mut drop_rng))?;
        let (loss, grads) = model.backward_batch(&tr, &batch.targets, Some(&batch.mask), config.loss, trainable)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::Diverged {
                step,
                what: format!("loss {loss}"),
            });
        }
        let lr = config.lr_at(step);
        adam.step(&mut model.weights, &grads, lr, step + 1, config);
        if !model.weights.is_finite() {
            return Err(TrainError::Diverged {
                step,
                what: "non-finite weights after update".into(),
            });
        }
        acc += loss / dout;
        acc_n += 1;
        let last = step + 1 == config.steps;
        if last {
            model.weights.round_to_storage();
        }
        if (step + 1) % config.log_interval == 0 || last {
            let due = last || (config.val_interval > 0 && (step + 1) % config.val_interval == 0);
            let val_mse = if due && !val.is_empty() {
                Some(validate(&model, val, config.decode)?)
            } else {
                None
            };
            log.records.push(LogRecord {
                step: step + 1,
                ce_loss: acc / acc_n as f64,
                val_mse,
                lr,
                seconds: if config.timed { clock.elapsed().as_secs_f64() } else { 0.0 },
            });
            acc = 0.0;
            acc_n = 0;
        }
    }
    Ok((model, log))
}
