//! Motion-prediction scores (FID, ADE, FDE, DIV), episode-length summaries
//! and the pairwise durability comparison.
//!
//! Features come from the pretrained observation model: hidden activations
//! after its middle block, mean-pooled over time.

mod plot;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gptcore::{GptError, HeadKind, Mode, ModelCheckpoint, Phase};

pub use plot::{box_plot_svg, histogram_svg, line_plot_svg, Series};

/// Regularization added to sample covariances.
pub const COV_EPS: f64 = 1e-6;
/// Eigenvalues above this negative bound are clamped to zero.
pub const EIG_TOLERANCE: f64 = 1e-8;
/// Significant episode-length difference, s.
pub const DURABILITY_THRESHOLD: f64 = 6.0;
/// Sample count for diversity when data suffices.
pub const DIV_SAMPLES: usize = 200;
/// Upper edge of the episode-length histogram, s.
pub const HISTOGRAM_MAX: f64 = 15.0;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("eigenvalue {0} is below the tolerance")]
    Numerical(f64),
    #[error("non-finite input")]
    NonFinite,
    #[error("behavior `{0}` missing from one table")]
    KeyMismatch(String),
    #[error("feature extractor must be a pretrained observation model")]
    NotAnExtractor,
    #[error(transparent)]
    Model(#[from] GptError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source: String,
    pub extractor: String,
    /// One-based block index the activations come from.
    pub layer: usize,
}

/// Mean-pooled middle-block activations over the first
/// `min(T, context)` observations.
pub fn extract_features(
    extractor: &ModelCheckpoint,
    observations: &[Vec<f64>],
    source: &str,
) -> Result<FeatureVector, MetricsError> {
    if extractor.provenance.phase != Phase::Pretrained || extractor.config.head != HeadKind::Observation {
        return Err(MetricsError::NotAnExtractor);
    }
    if observations.is_empty() {
        return Err(MetricsError::TooFew { need: 1, got: 0 });
    }
    let t = observations.len().min(extractor.config.context);
    let out = extractor.forward(&observations[..t], Mode::Eval)?;
    let layer = extractor.feature_layer();
    let e = extractor.config.embed;
    let mut values = vec![0.0; e];
    for row in out.hidden[layer - 1].chunks_exact(e) {
        values.iter_mut().zip(row).for_each(|(v, x)| *v += x);
    }
    values.iter_mut().for_each(|v| *v /= t as f64);
    Ok(FeatureVector {
        values,
        source: source.into(),
        extractor: extractor.provenance.dataset.clone(),
        layer,
    })
}

/// Mean and sample covariance (divisor `n − 1`).
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), MetricsError> {
    let n = features.len();
    if n < 2 {
        return Err(MetricsError::TooFew { need: 2, got: n });
    }
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(MetricsError::Dimension(d, f.len()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

/// Fréchet distance between two feature sets; covariances get
/// [`COV_EPS`]·I added.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let (mr, sr) = gaussian_fit(real)?;
    let (mg, sg) = gaussian_fit(generated)?;
    if mr.len() != mg.len() {
        return Err(MetricsError::Dimension(mr.len(), mg.len()));
    }
    let eye = DMatrix::identity(mr.len(), mr.len()) * COV_EPS;
    fid_from_stats(&mr, &(sr + &eye), &mg, &(sg + eye))
}

/// `‖μr − μg‖² + Tr(Σr + Σg − 2(Σr Σg)^{1/2})`, with the trace of the
/// square root taken as `Tr((Σr^{1/2} Σg Σr^{1/2})^{1/2})`.
pub fn fid_from_stats(
    mu_r: &DVector<f64>,
    sigma_r: &DMatrix<f64>,
    mu_g: &DVector<f64>,
    sigma_g: &DMatrix<f64>,
) -> Result<f64, MetricsError> {
    let d = mu_r.len();
    for (r, c) in [sigma_r.shape(), sigma_g.shape()] {
        if r != d || c != d {
            return Err(MetricsError::Dimension(d, r.max(c)));
        }
    }
    if mu_g.len() != d {
        return Err(MetricsError::Dimension(d, mu_g.len()));
    }
    let root_r = sym_sqrt(sigma_r)?;
    let inner = &root_r * sigma_g * &root_r;
    let eig = SymmetricEigen::new(symmetrize(&inner)).eigenvalues;
    let mut tr_sqrt = 0.0;
    for &l in eig.iter() {
        tr_sqrt += checked(l)?.sqrt();
    }
    let diff = mu_r - mu_g;
    let value = diff.dot(&diff) + sigma_r.trace() + sigma_g.trace() - 2.0 * tr_sqrt;
    if value.is_finite() {
        Ok(value.max(0.0))
    } else {
        Err(MetricsError::NonFinite)
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn checked(l: f64) -> Result<f64, MetricsError> {
    if l < -EIG_TOLERANCE {
        Err(MetricsError::Numerical(l))
    } else {
        Ok(l.max(0.0))
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut roots = eig.eigenvalues.clone();
    for l in roots.iter_mut() {
        *l = checked(*l)?.sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Paired trajectories of joint-pose vectors, compared over the shorter of
/// the two lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub behavior: String,
    pub generated: Vec<Vec<f64>>,
    pub real: Vec<Vec<f64>>,
}

impl TrajectoryPair {
    fn common(&self) -> usize {
        self.generated.len().min(self.real.len())
    }

    fn distance(&self, t: usize) -> f64 {
        self.generated[t]
            .iter()
            .zip(&self.real[t])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn usable(pairs: &[TrajectoryPair]) -> Result<(), MetricsError> {
    if pairs.is_empty() || pairs.iter().any(|p| p.common() == 0) {
        return Err(MetricsError::TooFew { need: 1, got: 0 });
    }
    for p in pairs {
        for t in 0..p.common() {
            if p.generated[t].len() != p.real[t].len() {
                return Err(MetricsError::Dimension(p.real[t].len(), p.generated[t].len()));
            }
        }
    }
    Ok(())
}

/// Mean over pairs of the per-step mean joint-pose distance.
pub fn ade(pairs: &[TrajectoryPair]) -> Result<f64, MetricsError> {
    usable(pairs)?;
    let total: f64 = pairs
        .iter()
        .map(|p| (0..p.common()).map(|t| p.distance(t)).sum::<f64>() / p.common() as f64)
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Mean over pairs of the joint-pose distance at the last common step.
pub fn fde(pairs: &[TrajectoryPair]) -> Result<f64, MetricsError> {
    usable(pairs)?;
    Ok(pairs.iter().map(|p| p.distance(p.common() - 1)).sum::<f64>() / pairs.len() as f64)
}

/// Desk-scale sample count: `min(200, 4·available)`.
pub fn div_samples(available: usize) -> usize {
    DIV_SAMPLES.min(4 * available)
}

/// Mean distance between `n` seeded pairs drawn with replacement. The set
/// is sorted first, so the result does not depend on input order.
pub fn div(features: &[Vec<f64>], n: usize, seed: u64) -> Result<f64, MetricsError> {
    if features.is_empty() || n == 0 {
        return Err(MetricsError::TooFew { need: 1, got: 0 });
    }
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(MetricsError::Dimension(d, f.len()));
    }
    let mut sorted: Vec<&Vec<f64>> = features.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sorted.len();
    let first: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
    let second: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
    let total: f64 = first
        .iter()
        .zip(&second)
        .map(|(&i, &j)| {
            sorted[i]
                .iter()
                .zip(sorted[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Quantile with plotting position `p·(n + 1)`, linearly interpolated and
/// clamped to the sample range. `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = p * (n + 1) as f64;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n as f64 {
        return sorted[n - 1];
    }
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub summary: FiveNumber,
    pub mean: f64,
    /// Counts per one-second bin over `[0, 15]`; the last bin is closed.
    pub histogram: Vec<usize>,
}

pub fn episode_length_stats(lengths: &[f64]) -> Result<LengthStats, MetricsError> {
    if lengths.is_empty() {
        return Err(MetricsError::TooFew { need: 1, got: 0 });
    }
    if lengths.iter().any(|l| !l.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut s = lengths.to_vec();
    s.sort_by(f64::total_cmp);
    let bins = HISTOGRAM_MAX as usize;
    let mut histogram = vec![0; bins];
    for &l in &s {
        let k = (l.max(0.0).floor() as usize).min(bins - 1);
        histogram[k] += 1;
    }
    Ok(LengthStats {
        summary: FiveNumber {
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
        },
        mean: s.iter().sum::<f64>() / s.len() as f64,
        histogram,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Durability {
    /// Behaviors where A outlasts B by more than the threshold.
    pub a_better: usize,
    pub b_better: usize,
    /// Mean absolute difference among A's significant wins, s.
    pub a_mean_diff: Option<f64>,
    pub b_mean_diff: Option<f64>,
    pub threshold: f64,
}

/// Counts behaviors whose length difference strictly exceeds `threshold`
/// in either direction.
pub fn durability_compare(
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
    threshold: f64,
) -> Result<Durability, MetricsError> {
    if let Some(k) = a.keys().find(|k| !b.contains_key(*k)).or_else(|| b.keys().find(|k| !a.contains_key(*k))) {
        return Err(MetricsError::KeyMismatch(k.clone()));
    }
    let (mut wa, mut wb) = (Vec::new(), Vec::new());
    for (k, &la) in a {
        let diff = la - b[k];
        if diff > threshold {
            wa.push(diff);
        } else if -diff > threshold {
            wb.push(-diff);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(Durability {
        a_better: wa.len(),
        b_better: wb.len(),
        a_mean_diff: mean(&wa),
        b_mean_diff: mean(&wb),
        threshold,
    })
}

/// Mean length per behavior from `(behavior, length)` rows.
pub fn mean_by_behavior<'a>(rows: impl IntoIterator<Item = (&'a str, f64)>) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (b, l) in rows {
        let e = acc.entry(b.to_string()).or_default();
        e.0 += l;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// A score, or the reason it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Value(f64),
    Failed(String),
}

impl Score {
    pub fn of(r: Result<f64, MetricsError>) -> Self {
        match r {
            Ok(v) => Score::Value(v),
            Err(e) => Score::Failed(e.to_string()),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Score::Value(v) => Some(*v),
            Score::Failed(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorScores {
    pub behavior: String,
    pub fid: Score,
    pub ade: Score,
    pub fde: Score,
    pub mean_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub checkpoint: String,
    pub extractor: String,
    pub dataset: String,
    pub seed: u64,
    pub fid: Score,
    pub ade: Score,
    pub fde: Score,
    pub div: Score,
    pub real_div: Score,
    /// Keyed by split name.
    pub lengths: BTreeMap<String, LengthStats>,
    pub per_behavior: Vec<BehaviorScores>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Headline row (`behavior = all`, validation mean length when present)
/// then one row per behavior.
    pub fn to_csv(&self) -> String {
        let cell = |s: &Score| s.value().map_or(String::new(), |v| format!("{v}"));
        let mut out = String::from("model,behavior,fid,ade,fde,div,mean_length\n");
        let mean = self
            .lengths
            .get("validation")
            .or_else(|| self.lengths.values().next())
            .map_or(String::new(), |l| format!("{}", l.mean));
        out.push_str(&format!(
            "{},all,{},{},{},{},{}\n",
            self.model,
            cell(&self.fid),
            cell(&self.ade),
            cell(&self.fde),
            cell(&self.div),
            mean
        ));
        for b in &self.per_behavior {
            out.push_str(&format!(
                "{},{},{},{},{},,{}\n",
                self.model,
                b.behavior,
                cell(&b.fid),
                cell(&b.ade),
                cell(&b.fde),
                b.mean_length
            ));
        }
        out
    }
}
