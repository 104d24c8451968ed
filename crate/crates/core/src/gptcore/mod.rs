//! Decoder-only transformer over continuous input vectors with per-dimension
//! categorical output heads.
//!
//! Inputs are z-scored and embedded by a single affine map plus learned
//! positions. Each output dimension is split into `K` uniform bins; the head
//! emits `D_out × K` logits per step. Forward and backward passes are written
//! out by hand in `f64`.

mod io;
mod model;

pub(crate) mod linalg;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::DimStats;

pub use io::{decode_checkpoint, encode_checkpoint, load, save, MAGIC, VERSION};
pub use model::{Decode, ForwardOutput, LossKind, Mode, Trace, Trainable};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
/// Discretizer range half-width in standard deviations.
pub const RANGE_STDS: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum GptError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("window of {t} steps exceeds context length {context}")]
    ContextExceeded { t: usize, context: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("target bin {index} outside 0..{bins}")]
    TargetOutOfRange { index: usize, bins: usize },
    #[error("{0}")]
    Precondition(String),
    #[error("not an HMGW checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated in tensor `{tensor}`: needs {expected} bytes, {got} available")]
    Truncated { tensor: String, expected: usize, got: usize },
    #[error("corrupt checkpoint header: {0}")]
    Header(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Observation,
    Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrained,
    Finetuned,
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Maximum window length, steps.
    pub context: usize,
    pub embed: usize,
    pub layers: usize,
    pub heads: usize,
    /// Bins per output dimension.
    pub bins: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub head: HeadKind,
    pub dropout: f64,
}

impl ModelConfig {
    /// Four layers of width 128 with four heads, 32-step context, 64 bins.
    pub fn desk(input_dim: usize, output_dim: usize, head: HeadKind) -> Self {
        Self {
            context: 32,
            embed: 128,
            layers: 4,
            heads: 4,
            bins: 64,
            input_dim,
            output_dim,
            head,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), GptError> {
        let bad = |m: &str| Err(GptError::Config(m.into()));
        if self.context == 0 || self.embed == 0 || self.layers == 0 || self.heads == 0 {
            return bad("context, embed, layers and heads must be positive");
        }
        if !self.embed.is_multiple_of(self.heads) {
            return bad("embed must be divisible by heads");
        }
        if self.bins < 2 {
            return bad("at least two bins per dimension");
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input and output dims must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        let limits = [
            (self.context, 4096),
            (self.embed, 8192),
            (self.layers, 256),
            (self.input_dim, 65536),
            (self.output_dim, 65536),
            (self.bins, 4096),
        ];
        if limits.iter().any(|&(v, max)| v > max) || self.heads > self.embed {
            return bad("dimension too large");
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.output_dim * self.bins
    }

    /// Every tensor in storage order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let e = self.embed;
        let mut out = vec![
            TensorSpec::new("in.w", &[self.input_dim, e], Init::Normal, true),
            TensorSpec::new("in.b", &[e], Init::Zeros, true),
            TensorSpec::new("pos", &[self.context, e], Init::Normal, true),
        ];
        for l in 0..self.layers {
            for (name, shape, init) in Block::layout(e) {
                out.push(TensorSpec::new(&format!("h{l}.{name}"), &shape, init, true));
            }
        }
        out.push(TensorSpec::new("lnf.g", &[e], Init::Ones, true));
        out.push(TensorSpec::new("lnf.b", &[e], Init::Zeros, true));
        out.push(TensorSpec::new("head.w", &[e, self.head_width()], Init::Normal, false));
        out.push(TensorSpec::new("head.b", &[self.head_width()], Init::Zeros, false));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensor_specs().iter().map(TensorSpec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Everything but the output head.
    pub backbone: bool,
}

impl TensorSpec {
    fn new(name: &str, shape: &[usize], init: Init, backbone: bool) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            backbone,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weight matrices get weight decay; vectors and the position table do
    /// not.
    pub fn decayed(&self) -> bool {
        self.shape.len() == 2 && self.name != "pos"
    }
}

/// One transformer block: pre-norm attention then pre-norm MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Block {
    fn layout(e: usize) -> [(&'static str, Vec<usize>, Init); 16] {
        use Init::*;
        [
            ("ln1.g", vec![e], Ones),
            ("ln1.b", vec![e], Zeros),
            ("attn.wq", vec![e, e], Normal),
            ("attn.bq", vec![e], Zeros),
            ("attn.wk", vec![e, e], Normal),
            ("attn.bk", vec![e], Zeros),
            ("attn.wv", vec![e, e], Normal),
            ("attn.bv", vec![e], Zeros),
            ("attn.wo", vec![e, e], Normal),
            ("attn.bo", vec![e], Zeros),
            ("ln2.g", vec![e], Ones),
            ("ln2.b", vec![e], Zeros),
            ("mlp.w1", vec![e, 4 * e], Normal),
            ("mlp.b1", vec![4 * e], Zeros),
            ("mlp.w2", vec![4 * e, e], Normal),
            ("mlp.b2", vec![e], Zeros),
        ]
    }

    fn fields(&self) -> [&Vec<f64>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Vec<f64>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_tensors(mut it: impl Iterator<Item = Vec<f64>>) -> Self {
        let mut next = || it.next().expect("block tensor");
        Self {
            ln1_g: next(),
            ln1_b: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_g: next(),
            ln2_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        }
    }
}

/// All parameters, or a gradient with the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub w_in: Vec<f64>,
    pub b_in: Vec<f64>,
    pub pos: Vec<f64>,
    pub blocks: Vec<Block>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Weights {
    /// Builds weights from tensors listed in [`ModelConfig::tensor_specs`] order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Vec<f64>>) -> Result<Self, GptError> {
        let specs = config.tensor_specs();
        if tensors.len() != specs.len() {
            return Err(GptError::Shape {
                what: "tensor count".into(),
                expected: specs.len(),
                got: tensors.len(),
            });
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.len() != t.len() {
                return Err(GptError::Shape {
                    what: format!("tensor `{}`", s.name),
                    expected: s.len(),
                    got: t.len(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let w_in = it.next().expect("counted");
        let b_in = it.next().expect("counted");
        let pos = it.next().expect("counted");
        let blocks = (0..config.layers).map(|_| Block::from_tensors(it.by_ref().take(16))).collect();
        Ok(Self {
            w_in,
            b_in,
            pos,
            blocks,
            lnf_g: it.next().expect("counted"),
            lnf_b: it.next().expect("counted"),
            head_w: it.next().expect("counted"),
            head_b: it.next().expect("counted"),
        })
    }

    /// Seeded GPT-style initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, GptError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let tensors = config
            .tensor_specs()
            .iter()
            .map(|s| match s.init {
                Init::Normal => (0..s.len()).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; s.len()],
                Init::Ones => vec![1.0; s.len()],
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Tensors in storage order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.w_in, &self.b_in, &self.pos];
        for b in &self.blocks {
            out.extend(b.fields());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.w_in, &mut self.b_in, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`, the precision checkpoints
    /// are stored at.
    pub fn round_to_storage(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

/// Uniform per-dimension bins over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: usize,
}

impl Discretizer {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, bins: usize) -> Result<Self, GptError> {
        let d = Self { lo, hi, bins };
        d.validate()?;
        Ok(d)
    }

    /// Ranges `mean ± 5·std` from train-split statistics.
    pub fn from_stats(stats: &DimStats, bins: usize) -> Result<Self, GptError> {
        let lo = stats.mean.iter().zip(&stats.std).map(|(m, s)| m - RANGE_STDS * s).collect();
        let hi = stats.mean.iter().zip(&stats.std).map(|(m, s)| m + RANGE_STDS * s).collect();
        Self::new(lo, hi, bins)
    }

    pub fn validate(&self) -> Result<(), GptError> {
        if self.bins < 2 {
            return Err(GptError::Config("at least two bins per dimension".into()));
        }
        if self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return Err(GptError::Config("discretizer ranges disagree".into()));
        }
        for (l, h) in self.lo.iter().zip(&self.hi) {
            if !(l.is_finite() && h.is_finite() && l < h && (h - l) / self.bins as f64 > 0.0) {
                return Err(GptError::Config(format!("bad bin range [{l}, {h}]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, d: usize) -> f64 {
        (self.hi[d] - self.lo[d]) / self.bins as f64
    }

    pub fn center(&self, d: usize, k: usize) -> f64 {
        self.lo[d] + (k as f64 + 0.5) * self.width(d)
    }

    /// Bin index of `value`; out-of-range values land in the edge bins.
    pub fn discretize(&self, value: f64, d: usize) -> usize {
        let k = ((value - self.lo[d]) / self.width(d)).floor();
        if k.is_nan() || k < 0.0 {
            0
        } else {
            (k as usize).min(self.bins - 1)
        }
    }

    /// Probability-weighted average of bin centers.
    pub fn decode(&self, probs: &[f64], d: usize) -> f64 {
        probs.iter().enumerate().map(|(k, p)| p * self.center(d, k)).sum()
    }

    /// Center of the most probable bin; ties go to the lower bin.
    pub fn decode_argmax(&self, probs: &[f64], d: usize) -> f64 {
        let mut best = 0;
        for (k, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = k;
            }
        }
        self.center(d, best)
    }
}

/// Input z-scoring applied before the embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn from_stats(stats: &DimStats) -> Self {
        Self {
            mean: stats.mean.clone(),
            std: stats.std.clone(),
        }
    }

    fn validate(&self, dim: usize) -> Result<(), GptError> {
        if self.mean.len() != dim || self.std.len() != dim {
            return Err(GptError::Shape {
                what: "input normalization".into(),
                expected: dim,
                got: self.mean.len().min(self.std.len()),
            });
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(GptError::Config("input normalization needs finite means and positive stds".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub steps: u64,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub weights: Weights,
    pub discretizer: Discretizer,
    pub input_norm: InputNorm,
    pub provenance: Provenance,
}

impl ModelCheckpoint {
    /// Freshly initialized model; weights rounded to storage precision.
    pub fn init(
        config: ModelConfig,
        input_norm: InputNorm,
        discretizer: Discretizer,
        provenance: Provenance,
        seed: u64,
    ) -> Result<Self, GptError> {
        let mut weights = Weights::init(&config, seed)?;
        weights.round_to_storage();
        let c = Self {
            config,
            weights,
            discretizer,
            input_norm,
            provenance,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), GptError> {
        self.config.validate()?;
        self.discretizer.validate()?;
        if self.discretizer.dim() != self.config.output_dim || self.discretizer.bins != self.config.bins {
            return Err(GptError::Config("discretizer does not match the output head".into()));
        }
        self.input_norm.validate(self.config.input_dim)?;
        let lens: Vec<usize> = self.weights.tensors().iter().map(|t| t.len()).collect();
        let specs = self.config.tensor_specs();
        if lens.len() != specs.len() {
            return Err(GptError::Shape {
                what: "tensor count".into(),
                expected: specs.len(),
                got: lens.len(),
            });
        }
        for (s, &n) in specs.iter().zip(&lens) {
            if s.len() != n {
                return Err(GptError::Shape {
                    what: format!("tensor `{}`", s.name),
                    expected: s.len(),
                    got: n,
                });
            }
        }
        if !self.weights.is_finite() {
            return Err(GptError::NonFinite("weights".into()));
        }
        Ok(())
    }

    /// Replaces the output head with a freshly initialized action head. The
    /// backbone is untouched; the discretizer is rebuilt from `action_stats`.
    pub fn swap_head(&self, action_stats: &DimStats, seed: u64) -> Result<Self, GptError> {
        if self.provenance.phase != Phase::Pretrained || self.config.head != HeadKind::Observation {
            return Err(GptError::Precondition(
                "head swap needs a pretrained checkpoint with an observation head".into(),
            ));
        }
        let d_act = action_stats.mean.len();
        if d_act == 0 {
            return Err(GptError::Precondition("action dimension must be at least 1".into()));
        }
        let mut config = self.config.clone();
        config.output_dim = d_act;
        config.head = HeadKind::Action;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut weights = self.weights.clone();
        weights.head_w = (0..config.embed * config.head_width())
            .map(|_| f64::from(normal.sample(&mut rng) as f32))
            .collect();
        weights.head_b = vec![0.0; config.head_width()];
        let out = Self {
            discretizer: Discretizer::from_stats(action_stats, config.bins)?,
            config,
            weights,
            input_norm: self.input_norm.clone(),
            provenance: self.provenance.clone(),
        };
        out.validate()?;
        Ok(out)
    }

    /// Layer whose output serves as the motion feature: `⌈L/2⌉`, one-based.
    pub fn feature_layer(&self) -> usize {
        self.config.layers.div_ceil(2)
    }
}

#[cfg(test)]
mod tests;
