//! In-memory training pairs and batch assembly.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{normalization_stats, Dataset, DatasetError, DatasetFraction, NormStats, Split};
use crate::gptcore::Discretizer;

/// What the model predicts at each input step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Targets {
    /// The observation one step later.
    NextObservation,
    /// The action taken at the same step.
    Action,
}

/// A list of episodes drawn from one dataset.
#[derive(Clone, Debug)]
pub struct Selection<'a> {
    dataset: &'a Dataset,
    ids: Vec<String>,
}

impl<'a> Selection<'a> {
    pub fn split(dataset: &'a Dataset, split: Split) -> Self {
        let ids = dataset.manifest().split(split).map(|e| e.id.clone()).collect();
        Self { dataset, ids }
    }

    pub fn fraction(dataset: &'a Dataset, fraction: &DatasetFraction) -> Result<Self, DatasetError> {
        if fraction.base != dataset.manifest().id {
            return Err(DatasetError::InvalidManifest(format!(
                "fraction of `{}` applied to `{}`",
                fraction.base,
                dataset.manifest().id
            )));
        }
        Self::ids(dataset, fraction.episodes.clone())
    }

    pub fn ids(dataset: &'a Dataset, ids: Vec<String>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for id in &ids {
            dataset.manifest().entry(id)?;
            if !seen.insert(id) {
                return Err(DatasetError::DuplicateEpisode(id.clone()));
            }
        }
        Ok(Self { dataset, ids })
    }

    pub fn episode_ids(&self) -> &[String] {
        &self.ids
    }

    /// Loads every episode and pairs inputs with `targets`. Episodes too
    /// short to yield a pair are skipped.
    pub fn load(&self, targets: Targets) -> Result<Pairs, DatasetError> {
        let m = self.dataset.manifest();
        let output_dim = match targets {
            Targets::NextObservation => m.obs_dim,
            Targets::Action => m.act_dim,
        };
        let mut episodes = Vec::with_capacity(self.ids.len());
        for id in &self.ids {
            let f = self.dataset.load_frames(id)?;
            let (rows, shift) = match targets {
                Targets::NextObservation => (f.len.saturating_sub(1), 1),
                Targets::Action => (f.len, 0),
            };
            if rows == 0 {
                continue;
            }
            let inputs = f.observations[..rows * m.obs_dim].iter().map(|&v| f64::from(v)).collect();
            let values = match targets {
                Targets::NextObservation => f.observations[shift * m.obs_dim..].to_vec(),
                Targets::Action => f.actions,
            };
            episodes.push(EpisodePairs {
                id: id.clone(),
                len: rows,
                input_dim: m.obs_dim,
                output_dim,
                inputs,
                targets: values,
            });
        }
        Ok(Pairs {
            input_dim: m.obs_dim,
            output_dim,
            episodes,
        })
    }
}

/// Train-split statistics, from the manifest when present.
pub(crate) fn stats(dataset: &Dataset) -> Result<NormStats, DatasetError> {
    match &dataset.manifest().stats {
        Some(s) => Ok(s.clone()),
        None => normalization_stats(dataset),
    }
}

/// Aligned input and target rows of one episode.
#[derive(Clone, Debug)]
pub struct EpisodePairs {
    pub id: String,
    len: usize,
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f32>,
}

impl EpisodePairs {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Input rows `start..start + steps`, flattened.
    pub fn inputs(&self, start: usize, steps: usize) -> &[f64] {
        &self.inputs[start * self.input_dim..(start + steps) * self.input_dim]
    }

    pub fn target_values(&self, t: usize) -> &[f32] {
        &self.targets[t * self.output_dim..(t + 1) * self.output_dim]
    }
}

#[derive(Clone, Debug)]
pub struct Pairs {
    input_dim: usize,
    output_dim: usize,
    episodes: Vec<EpisodePairs>,
}

pub(crate) struct Batch {
    pub inputs: Vec<f64>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Pairs {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn episodes(&self) -> &[EpisodePairs] {
        &self.episodes
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Total number of target steps.
    pub fn steps(&self) -> usize {
        self.episodes.iter().map(EpisodePairs::len).sum()
    }

    /// `batch` windows of `window` steps at uniform (episode, start) pairs.
    /// Short episodes are front-padded with their first input row; padded
    /// rows are masked out.
    pub(crate) fn sample(&self, disc: &Discretizer, batch: usize, window: usize, rng: &mut ChaCha8Rng) -> Batch {
        let (din, dout) = (self.input_dim, self.output_dim);
        let mut out = Batch {
            inputs: Vec::with_capacity(batch * window * din),
            targets: Vec::with_capacity(batch * window * dout),
            mask: Vec::with_capacity(batch * window),
        };
        for _ in 0..batch {
            let ep = &self.episodes[rng.gen_range(0..self.episodes.len())];
            let (start, pad) = if ep.len >= window {
                (rng.gen_range(0..=ep.len - window), 0)
            } else {
                (0, window - ep.len)
            };
            for _ in 0..pad {
                out.inputs.extend_from_slice(ep.inputs(0, 1));
                out.targets.extend(std::iter::repeat_n(0, dout));
                out.mask.push(false);
            }
            let steps = window - pad;
            out.inputs.extend_from_slice(ep.inputs(start, steps));
            for t in start..start + steps {
                let row = ep.target_values(t);
                out.targets.extend(row.iter().enumerate().map(|(d, &v)| disc.discretize(f64::from(v), d)));
                out.mask.push(true);
            }
        }
        out
    }
}
