//! On-disk rollout datasets: one HMGE file per episode plus a JSON manifest.
//!
//! ```text
//! <root>/manifest.json
//! <root>/episodes/<episode id>.hmge
//! <root>/.lock
//! ```
//!
//! Files are replaced by writing a temporary sibling and renaming it, so a
//! reader sees either the old or the new version. One writer at a time holds
//! an advisory lock on `.lock`; readers never lock.

mod format;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::experts::Episode;

pub use format::{decode as decode_episode, encode as encode_episode, Frames, HEADER_LEN, MAGIC, VERSION};

pub const MANIFEST_VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-6;

/// Per-step feature rows.
pub type Rows = Vec<Vec<f64>>;

/// Behaviors whose every rollout is held out for validation.
pub const VALIDATION_BEHAVIORS: [&str; 2] = ["walk-backward", "run-left"];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not an HMGE file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("corrupt: {0}")]
    Corrupt(String),
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("episode `{0}` already stored")]
    DuplicateEpisode(String),
    #[error("no episode `{0}`")]
    UnknownEpisode(String),
    #[error("window [{start}, {start}+{length}) outside episode `{id}` of {len} steps")]
    WindowOutOfRange {
        id: String,
        start: usize,
        length: usize,
        len: usize,
    },
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("dataset at {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("dataset already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("invalid name `{0}`: use ASCII letters, digits, '-' and '_'")]
    InvalidName(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("unknown split `{0}`: expected train or validation")]
    UnknownSplit(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn check_name(name: &str) -> Result<(), DatasetError> {
    let ok = !name.is_empty()
        && name.len() <= 96
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(DatasetError::InvalidName(name.into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Validation];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| DatasetError::UnknownSplit(s.into()))
    }
}

/// Split rule used when building datasets: whole validation behaviors, and
/// for the rest the last fifth of the rollout indices (at least one when a
/// behavior has two or more rollouts).
pub fn split_for(behavior: &str, index: usize, rollouts: usize) -> Split {
    if VALIDATION_BEHAVIORS.contains(&behavior) {
        return Split::Validation;
    }
    let held = if rollouts < 2 { 0 } else { (rollouts / 5).max(1) };
    if index + held >= rollouts {
        Split::Validation
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub id: String,
    pub behavior: String,
    /// Noise seed the rollout was generated with.
    pub seed: u64,
    pub length: usize,
    pub terminated_by_fall: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorCount {
    pub name: String,
    pub episodes: usize,
}

/// Per-dimension summary over every train-split timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
}

impl DimStats {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn consistent(&self, dim: usize) -> bool {
        [&self.min, &self.max, &self.mean, &self.std].iter().all(|v| v.len() == dim)
            && self.std.iter().all(|&s| s >= STD_FLOOR)
            && [&self.min, &self.max, &self.mean].iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub steps: usize,
    pub obs: DimStats,
    pub act: DimStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub id: String,
    pub seed: u64,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub behaviors: Vec<BehaviorCount>,
    pub episodes: Vec<EpisodeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<NormStats>,
}

impl DatasetManifest {
    pub fn new(id: &str, seed: u64, obs_dim: usize, act_dim: usize) -> Result<Self, DatasetError> {
        check_name(id)?;
        let m = Self {
            format_version: MANIFEST_VERSION,
            id: id.into(),
            seed,
            obs_dim,
            act_dim,
            behaviors: Vec::new(),
            episodes: Vec::new(),
            stats: None,
        };
        m.check()?;
        Ok(m)
    }

    /// Parses and checks a manifest. Never panics on malformed input.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let m: Self = serde_json::from_slice(bytes)?;
        m.check()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    fn check(&self) -> Result<(), DatasetError> {
        let bad = |msg: &str| Err(DatasetError::InvalidManifest(msg.into()));
        if self.format_version != MANIFEST_VERSION {
            return Err(DatasetError::UnsupportedVersion(self.format_version));
        }
        check_name(&self.id)?;
        if self.obs_dim == 0 || self.obs_dim > u32::MAX as usize || self.act_dim > u32::MAX as usize {
            return bad("observation width must be positive");
        }
        let mut ids = HashSet::new();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.episodes {
            check_name(&e.id)?;
            if !ids.insert(e.id.as_str()) {
                return Err(DatasetError::DuplicateEpisode(e.id.clone()));
            }
            if e.length == 0 || e.length > u32::MAX as usize {
                return bad("episode length must be positive");
            }
            *counts.entry(e.behavior.as_str()).or_default() += 1;
        }
        let mut names = HashSet::new();
        for b in &self.behaviors {
            if !names.insert(b.name.as_str()) {
                return bad("behavior listed twice");
            }
            if counts.get(b.name.as_str()).copied().unwrap_or(0) != b.episodes {
                return bad("behavior counts disagree with the episode list");
            }
        }
        if counts.keys().any(|k| !names.contains(k)) {
            return bad("episode of an unlisted behavior");
        }
        if let Some(s) = &self.stats {
            if !(s.obs.consistent(self.obs_dim) && s.act.consistent(self.act_dim)) {
                return bad("normalization stats do not match the dimensions");
            }
        }
        Ok(())
    }

    pub fn entry(&self, id: &str) -> Result<&EpisodeEntry, DatasetError> {
        self.episodes
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| DatasetError::UnknownEpisode(id.into()))
    }

    pub fn count(&self, behavior: &str) -> usize {
        self.behaviors.iter().find(|b| b.name == behavior).map_or(0, |b| b.episodes)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &EpisodeEntry> {
        self.episodes.iter().filter(move |e| e.split == split)
    }
}

pub fn episode_id(behavior: &str, seed: u64) -> String {
    format!("{behavior}-{seed:016x}")
}

fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

fn episode_path(root: &Path, id: &str) -> PathBuf {
    root.join("episodes").join(format!("{id}.hmge"))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes `bytes` beside `path` and renames it into place. `interrupt` stops
/// after the temporary file is written, as a crash would.
fn persist(path: &Path, bytes: &[u8], interrupt: bool) -> Result<(), DatasetError> {
    let tmp = temp_path(path);
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    if interrupt {
        return Err(DatasetError::Io {
            path: tmp,
            source: io::Error::other("interrupted before rename"),
        });
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Read-only view of a stored dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_path_buf();
        let path = manifest_path(&root);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let manifest = DatasetManifest::from_json_bytes(&bytes)?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn episode_path(&self, id: &str) -> PathBuf {
        episode_path(&self.root, id)
    }

    pub fn load_frames(&self, id: &str) -> Result<Frames, DatasetError> {
        let entry = self.manifest.entry(id)?;
        let path = self.episode_path(id);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let frames = format::decode(&bytes)?;
        let dims = [
            ("stored length", entry.length, frames.len),
            ("stored observation width", self.manifest.obs_dim, frames.obs_dim),
            ("stored action width", self.manifest.act_dim, frames.act_dim),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(DatasetError::DimensionMismatch { what, expected, got });
            }
        }
        Ok(frames)
    }

    /// Rows `start..start + length` of one episode, widened to `f64`:
    /// observations, then actions.
    pub fn load_window(&self, id: &str, start: usize, length: usize) -> Result<(Rows, Rows), DatasetError> {
        let entry = self.manifest.entry(id)?;
        if start.checked_add(length).is_none_or(|end| end > entry.length) {
            return Err(DatasetError::WindowOutOfRange {
                id: id.into(),
                start,
                length,
                len: entry.length,
            });
        }
        let f = self.load_frames(id)?;
        let widen = |row: &[f32]| row.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
        let range = start..start + length;
        Ok((
            range.clone().map(|t| widen(f.obs_row(t))).collect(),
            range.map(|t| widen(f.act_row(t))).collect(),
        ))
    }

    /// Writes one episode as CSV: `step, obs_0.., act_0..`.
    pub fn export_csv<W: Write>(&self, id: &str, out: W) -> Result<(), DatasetError> {
        let f = self.load_frames(id)?;
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| DatasetError::Io {
            path: PathBuf::from("<csv>"),
            source: io::Error::other(e),
        };
        let header: Vec<String> = std::iter::once("step".to_string())
            .chain((0..f.obs_dim).map(|i| format!("obs_{i}")))
            .chain((0..f.act_dim).map(|i| format!("act_{i}")))
            .collect();
        w.write_record(&header).map_err(wrap)?;
        for t in 0..f.len {
            let row: Vec<String> = std::iter::once(t.to_string())
                .chain(f.obs_row(t).iter().chain(f.act_row(t)).map(|v| v.to_string()))
                .collect();
            w.write_record(&row).map_err(wrap)?;
        }
        w.flush().map_err(io_err(Path::new("<csv>")))
    }
}

/// Exclusive writer. Holds the dataset's advisory lock until dropped.
#[derive(Debug)]
pub struct DatasetWriter {
    root: PathBuf,
    manifest: DatasetManifest,
    _lock: File,
    #[cfg(test)]
    pub(crate) crash_before_rename: bool,
}

impl DatasetWriter {
    /// Starts an empty dataset at `root`, which must not already hold one.
    pub fn create(root: impl AsRef<Path>, id: &str, seed: u64, obs_dim: usize, act_dim: usize) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_path_buf();
        let dir = root.join("episodes");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let lock = Self::lock(&root)?;
        if manifest_path(&root).exists() {
            return Err(DatasetError::AlreadyExists(root));
        }
        let manifest = DatasetManifest::new(id, seed, obs_dim, act_dim)?;
        let w = Self::with(root, manifest, lock);
        w.save_manifest()?;
        Ok(w)
    }

    /// Reopens an existing dataset for appending. Leftovers of interrupted
    /// writes are removed.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_path_buf();
        let lock = Self::lock(&root)?;
        let manifest = Dataset::open(&root)?.manifest;
        let w = Self::with(root, manifest, lock);
        w.sweep()?;
        Ok(w)
    }

    fn with(root: PathBuf, manifest: DatasetManifest, lock: File) -> Self {
        Self {
            root,
            manifest,
            _lock: lock,
            #[cfg(test)]
            crash_before_rename: false,
        }
    }

    fn lock(root: &Path) -> Result<File, DatasetError> {
        let path = root.join(".lock");
        let f = File::create(&path).map_err(io_err(&path))?;
        match f.try_lock() {
            Ok(()) => Ok(f),
            Err(fs::TryLockError::WouldBlock) => Err(DatasetError::Locked(root.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => Err(io_err(&path)(e)),
        }
    }

    fn sweep(&self) -> Result<(), DatasetError> {
        let dir = self.root.join("episodes");
        let known: HashSet<String> = self.manifest.episodes.iter().map(|e| format!("{}.hmge", e.id)).collect();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !known.contains(name) {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        let tmp = temp_path(&manifest_path(&self.root));
        if tmp.exists() {
            fs::remove_file(&tmp).map_err(io_err(&tmp))?;
        }
        Ok(())
    }

    fn interrupt(&self) -> bool {
        #[cfg(test)]
        return self.crash_before_rename;
        #[cfg(not(test))]
        false
    }

    fn save_manifest(&self) -> Result<(), DatasetError> {
        persist(&manifest_path(&self.root), self.manifest.to_json().as_bytes(), false)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Appends one episode and returns its id. Invalidates stored stats.
    pub fn write_episode(&mut self, episode: &Episode, split: Split) -> Result<String, DatasetError> {
        check_name(&episode.behavior)?;
        let frames = Frames::from_rows(&episode.observations, &episode.actions)?;
        if frames.len == 0 {
            return Err(DatasetError::DimensionMismatch {
                what: "episode length",
                expected: 1,
                got: 0,
            });
        }
        for (what, expected, got) in [
            ("observation width", self.manifest.obs_dim, frames.obs_dim),
            ("action width", self.manifest.act_dim, frames.act_dim),
        ] {
            if expected != got {
                return Err(DatasetError::DimensionMismatch { what, expected, got });
            }
        }
        let id = episode_id(&episode.behavior, episode.seed);
        if self.manifest.episodes.iter().any(|e| e.id == id) {
            return Err(DatasetError::DuplicateEpisode(id));
        }
        persist(&episode_path(&self.root, &id), &format::encode(&frames), self.interrupt())?;
        let mut next = self.manifest.clone();
        next.episodes.push(EpisodeEntry {
            id: id.clone(),
            behavior: episode.behavior.clone(),
            seed: episode.seed,
            length: frames.len,
            terminated_by_fall: episode.terminated_by_fall,
            split,
        });
        match next.behaviors.iter_mut().find(|b| b.name == episode.behavior) {
            Some(b) => b.episodes += 1,
            None => next.behaviors.push(BehaviorCount {
                name: episode.behavior.clone(),
                episodes: 1,
            }),
        }
        next.stats = None;
        let old = std::mem::replace(&mut self.manifest, next);
        if let Err(e) = self.save_manifest() {
            self.manifest = old;
            return Err(e);
        }
        Ok(id)
    }

    /// Computes train-split statistics, stores them in the manifest and
    /// returns a reader.
    pub fn finish(mut self) -> Result<Dataset, DatasetError> {
        let reader = Dataset {
            root: self.root.clone(),
            manifest: self.manifest.clone(),
        };
        self.manifest.stats = Some(normalization_stats(&reader)?);
        self.save_manifest()?;
        Ok(Dataset {
            root: self.root.clone(),
            manifest: self.manifest.clone(),
        })
    }
}

fn summarize(rows: &[&[f32]], dim: usize) -> DimStats {
    let n = rows.len() as f64;
    let mut min = vec![f64::INFINITY; dim];
    let mut max = vec![f64::NEG_INFINITY; dim];
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (j, &v) in r.iter().enumerate() {
            let v = f64::from(v);
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
            mean[j] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for (j, &v) in r.iter().enumerate() {
            let d = f64::from(v) - mean[j];
            var[j] += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    DimStats { min, max, mean, std }
}

/// Per-dimension statistics over every train-split timestep, at stored
/// precision. Episodes are visited in id order.
pub fn normalization_stats(dataset: &Dataset) -> Result<NormStats, DatasetError> {
    let mut ids: Vec<&str> = dataset.manifest.split(Split::Train).map(|e| e.id.as_str()).collect();
    if ids.is_empty() {
        return Err(DatasetError::EmptyTrainSplit);
    }
    ids.sort_unstable();
    let frames = ids.iter().map(|id| dataset.load_frames(id)).collect::<Result<Vec<_>, _>>()?;
    let obs: Vec<&[f32]> = frames.iter().flat_map(|f| (0..f.len).map(move |t| f.obs_row(t))).collect();
    let act: Vec<&[f32]> = frames.iter().flat_map(|f| (0..f.len).map(move |t| f.act_row(t))).collect();
    Ok(NormStats {
        steps: obs.len(),
        obs: summarize(&obs, dataset.manifest.obs_dim),
        act: summarize(&act, dataset.manifest.act_dim),
    })
}

impl NormStats {
    pub fn obs_dim(&self) -> usize {
        self.obs.dim()
    }

    pub fn act_dim(&self) -> usize {
        self.act.dim()
    }
}

/// A per-behavior stratified subset of a dataset's train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFraction {
    pub base: String,
    pub fraction: f64,
    pub seed: u64,
    pub episodes: Vec<String>,
}

/// Episodes kept from `n` at `fraction`: round half up, at least one.
pub fn fraction_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // The epsilon keeps products like 0.3 × 5 = 1.4999… on the upper side.
    ((fraction * n as f64 + 0.5 + 1e-9).floor() as usize).clamp(1, n)
}

/// Keeps a prefix of a seeded shuffle of each behavior's train episodes.
/// The shuffle does not depend on `fraction`, so smaller fractions nest
/// inside larger ones.
pub fn make_fraction(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetFraction, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::new();
    for b in &manifest.behaviors {
        let mut ids: Vec<&str> = manifest
            .split(Split::Train)
            .filter(|e| e.behavior == b.name)
            .map(|e| e.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let keep = fraction_count(ids.len(), fraction);
        episodes.extend(ids[..keep].iter().map(|s| s.to_string()));
    }
    Ok(DatasetFraction {
        base: manifest.id.clone(),
        fraction,
        seed,
        episodes,
    })
}

#[cfg(test)]
mod tests;
