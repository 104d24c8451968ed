//! Scripted reference motions and the noisy PD-tracking experts that roll
//! them out in the simulator.
//!
//! A behavior is a spline through joint-target knots. The expert's action is
//! the reference at time `t` plus a small balance correction; the
//! simulator's PD loop does the tracking.

mod gait;

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataset::{split_for, Dataset, DatasetError, DatasetWriter};

use crate::physim::{
    self, center_of_mass, contact_point_positions, is_fallen, observe, BodyModel, Pose, SimError, SimState, CONTROL_PERIOD,
};

pub use gait::{library, GaitParams, Schedule};

/// Hard cap on rollout length, steps (15 s at the control rate).
pub const MAX_EPISODE_STEPS: usize = 480;
/// Default standard deviation of the Gaussian action noise, rad.
pub const DEFAULT_NOISE: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum ExpertError {
    #[error("behavior `{behavior}`: time {t} s outside reference domain [0, {duration}]")]
    OutOfRange { behavior: String, t: f64, duration: f64 },
    #[error("behavior `{0}`: {1}")]
    InvalidBehavior(String, String),
    #[error("duplicate behavior name `{0}`")]
    DuplicateBehavior(String),
    #[error("noise scale must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
    #[error("behavior JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rollouts per behavior must be at least 1")]
    NoRollouts,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    CyclicModerate,
    CyclicFast,
    NonCyclic,
}

/// One spline knot: joint targets (rad) and the intended root velocity (m/s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub t: f64,
    pub targets: Vec<f64>,
    #[serde(default)]
    pub root_velocity: f64,
    /// Intended torso pitch, rad.
    #[serde(default)]
    pub lean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub name: String,
    pub category: Category,
    /// Nominal duration, s.
    pub duration: f64,
    /// Knots span one period and wrap around when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    pub knots: Vec<Knot>,
}

impl BehaviorSpec {
    pub fn from_json(text: &str) -> Result<Self, ExpertError> {
        Self::from_json_bytes(text.as_bytes())
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, ExpertError> {
        let spec: Self = serde_json::from_slice(bytes)?;
        spec.check_shape()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("behavior serializes")
    }

    fn invalid(&self, msg: impl Into<String>) -> ExpertError {
        ExpertError::InvalidBehavior(self.name.clone(), msg.into())
    }

    /// Model-independent checks: knot ordering, widths, finiteness.
    fn check_shape(&self) -> Result<(), ExpertError> {
        if self.name.is_empty() {
            return Err(self.invalid("empty name"));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(self.invalid("duration must be positive"));
        }
        let Some(first) = self.knots.first() else {
            return Err(self.invalid("no knots"));
        };
        let width = first.targets.len();
        let span = self.period.unwrap_or(self.duration);
        if !(span.is_finite() && span > 0.0) {
            return Err(self.invalid("period must be positive"));
        }
        let mut prev = f64::NEG_INFINITY;
        for k in &self.knots {
            if k.targets.len() != width {
                return Err(self.invalid("knots disagree on target width"));
            }
            if !k.t.is_finite() || k.targets.iter().any(|v| !v.is_finite()) || !k.root_velocity.is_finite() || !k.lean.is_finite() {
                return Err(self.invalid("non-finite knot"));
            }
            if k.t <= prev || k.t < 0.0 || k.t > span {
                return Err(self.invalid("knot times must increase within [0, period]"));
            }
            prev = k.t;
        }
        if self.period.is_some() && self.knots.last().is_some_and(|k| k.t >= span) {
            return Err(self.invalid("cyclic knots must lie in [0, period)"));
        }
        Ok(())
    }

    /// Checks that every knot fits `model`'s action width and joint limits.
    pub fn validate(&self, model: &BodyModel) -> Result<(), ExpertError> {
        self.check_shape()?;
        for k in &self.knots {
            if k.targets.len() != model.action_dim() {
                return Err(self.invalid(format!(
                    "knot width {} does not match {} actuated joints",
                    k.targets.len(),
                    model.action_dim()
                )));
            }
            for (j, (&v, joint)) in k.targets.iter().zip(model.joints()).enumerate() {
                if v < joint.lower || v > joint.upper {
                    return Err(self.invalid(format!("knot at t={} puts joint {j} at {v} outside limits", k.t)));
                }
            }
        }
        Ok(())
    }

    /// Reference joint targets at time `t`.
    pub fn targets(&self, t: f64) -> Result<Vec<f64>, ExpertError> {
        Ok(self.sample(t)?.0)
    }

    /// Intended root velocity at time `t`, m/s.
    pub fn root_velocity(&self, t: f64) -> Result<f64, ExpertError> {
        Ok(self.sample(t)?.1)
    }

    /// Intended torso pitch at time `t`, rad; linear between knots.
    pub fn lean(&self, t: f64) -> Result<f64, ExpertError> {
        Ok(self.sample(t)?.2)
    }

    fn sample(&self, t: f64) -> Result<(Vec<f64>, f64, f64), ExpertError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(ExpertError::OutOfRange {
                behavior: self.name.clone(),
                t,
                duration: self.duration,
            });
        }
        let n = self.knots.len();
        let k = &self.knots;
        if n == 1 {
            return Ok((k[0].targets.clone(), k[0].root_velocity, k[0].lean));
        }
        // Catmull-Rom through the knots; cyclic specs wrap, others clamp.
        let (i, u) = match self.period {
            Some(p) => {
                let tau = t.rem_euclid(p);
                let i = k.iter().rposition(|kn| kn.t <= tau).unwrap_or(n - 1);
                let t0 = k[i].t;
                let t1 = if i + 1 < n { k[i + 1].t } else { k[0].t + p };
                let tau = if tau < t0 { tau + p } else { tau };
                (i, (tau - t0) / (t1 - t0))
            }
            None => {
                if t <= k[0].t {
                    return Ok((k[0].targets.clone(), k[0].root_velocity, k[0].lean));
                }
                if t >= k[n - 1].t {
                    return Ok((k[n - 1].targets.clone(), k[n - 1].root_velocity, k[n - 1].lean));
                }
                let i = k.iter().rposition(|kn| kn.t <= t).expect("t past first knot");
                (i, (t - k[i].t) / (k[i + 1].t - k[i].t))
            }
        };
        let idx = |off: isize| -> usize {
            let j = i as isize + off;
            if self.period.is_some() {
                j.rem_euclid(n as isize) as usize
            } else {
                j.clamp(0, n as isize - 1) as usize
            }
        };
        let (a, b, c, d) = (&k[idx(-1)], &k[i], &k[idx(1)], &k[idx(2)]);
        let cr = |p0: f64, p1: f64, p2: f64, p3: f64| {
            let (u2, u3) = (u * u, u * u * u);
            0.5 * (2.0 * p1 + (p2 - p0) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u3)
        };
        let targets = (0..b.targets.len())
            .map(|j| cr(a.targets[j], b.targets[j], c.targets[j], d.targets[j]))
            .collect();
        let vel = b.root_velocity + u * (c.root_velocity - b.root_velocity);
        let lean = b.lean + u * (c.lean - b.lean);
        Ok((targets, vel, lean))
    }

    /// Initial pose: reference targets at t = 0, torso upright, lowest
    /// contact point sunk as deep as in the model's standing pose.
    pub fn initial_pose(&self, model: &BodyModel) -> Result<Pose, ExpertError> {
        let joints: Vec<f64> = self
            .targets(0.0)?
            .iter()
            .enumerate()
            .map(|(j, &q)| model.clamp_to_limits(j, q))
            .collect();
        Ok(grounded_pose(model, joints)?)
    }
}

/// Root placed so the lowest contact point sits at the standing pose's depth.
pub fn grounded_pose(model: &BodyModel, joints: Vec<f64>) -> Result<Pose, SimError> {
    let lowest = |pose: &Pose| -> Result<f64, SimError> {
        let s = physim::reset(model, pose)?;
        Ok(contact_point_positions(model, &s)
            .iter()
            .map(|p| p[1])
            .fold(f64::INFINITY, f64::min))
    };
    let standing = Pose::standing(model);
    let depth = lowest(&standing)?;
    let mut pose = Pose::at_rest([0.0, 0.0], 0.0, joints);
    let offset = lowest(&pose)?;
    pose.root_pos[1] = depth - offset;
    Ok(pose)
}

/// Balance feedback added to the reference targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    /// rad of stance-ankle target per m of center-of-mass offset from the
    /// middle of the supporting feet.
    pub com_offset: f64,
    /// rad of stance-ankle target per m/s of center-of-mass velocity error.
    pub com_rate: f64,
    /// rad of stance-ankle target per rad of torso pitch error.
    pub ankle_pitch: f64,
    /// rad of hip target per rad of torso pitch error.
    pub hip_pitch: f64,
    /// rad of hip target per rad/s of pitch rate.
    pub hip_rate: f64,
    /// Normal force above which a foot counts as supporting, N.
    pub stance_force: f64,
}

impl Default for Balance {
    fn default() -> Self {
        Self {
            com_offset: 4.0,
            com_rate: 0.8,
            ankle_pitch: 0.0,
            hip_pitch: 0.3,
            hip_rate: 0.02,
            stance_force: 20.0,
        }
    }
}

/// The expert's action: reference targets at time `t` plus balance
/// feedback. Hips correct torso pitch; ankles of supporting feet push the
/// center of mass toward the middle of the support.
///
/// Targets are ordered hip, knee, ankle per leg, one leg per contact link.
pub fn expert_action(
    model: &BodyModel,
    state: &SimState,
    behavior: &BehaviorSpec,
    t: f64,
) -> Result<Vec<f64>, ExpertError> {
    expert_action_with(model, state, behavior, t, &Balance::default())
}

pub fn expert_action_with(
    model: &BodyModel,
    state: &SimState,
    behavior: &BehaviorSpec,
    t: f64,
    gains: &Balance,
) -> Result<Vec<f64>, ExpertError> {
    let (mut targets, v_ref, lean) = behavior.sample(t)?;
    let pitch = state.root_angle - lean;
    let rate = state.root_ang_vel;
    let stance: Vec<bool> = state.contact_forces.iter().map(|&f| f > gains.stance_force).collect();
    let points = contact_point_positions(model, state);
    let (mut support, mut n) = (0.0, 0usize);
    for (&(link, _), p) in model.contact_points().iter().zip(&points) {
        let slot = model.contact_links().iter().position(|&l| l == link).expect("contact link");
        if stance[slot] {
            support += p[0];
            n += 1;
        }
    }
    let ankle_shift = if n > 0 {
        let (com, com_vel) = center_of_mass(model, state);
        gains.com_offset * (com[0] - support / n as f64)
            + gains.com_rate * (com_vel[0] - v_ref)
            + gains.ankle_pitch * pitch
    } else {
        0.0
    };
    for (leg, chunk) in targets.chunks_mut(3).enumerate() {
        if chunk.len() < 3 {
            break;
        }
        chunk[0] += gains.hip_pitch * pitch + gains.hip_rate * rate;
        if stance.get(leg).copied().unwrap_or(false) {
            chunk[2] += ankle_shift;
        }
    }
    Ok(targets)
}

/// One recorded rollout. Row `k` pairs the state before step `k` with the
/// action applied at step `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub behavior: String,
    pub seed: u64,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub states: Vec<SimState>,
    /// The step after the last row left the body fallen.
    pub terminated_by_fall: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Rolls `behavior` out with Gaussian action noise until the body falls or
/// [`MAX_EPISODE_STEPS`] rows are recorded. Recorded actions are the noisy,
/// limit-clamped targets the simulator actually received.
pub fn generate_rollout(
    behavior: &BehaviorSpec,
    model: &BodyModel,
    noise_scale: f64,
    seed: u64,
) -> Result<Episode, ExpertError> {
    if !(noise_scale.is_finite() && noise_scale >= 0.0) {
        return Err(ExpertError::InvalidNoise(noise_scale));
    }
    behavior.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_scale).expect("validated scale");
    let mut state = physim::reset(model, &behavior.initial_pose(model)?)?;
    let mut ep = Episode {
        behavior: behavior.name.clone(),
        seed,
        observations: Vec::new(),
        actions: Vec::new(),
        states: Vec::new(),
        terminated_by_fall: false,
    };
    for k in 0..MAX_EPISODE_STEPS {
        let t = k as f64 * CONTROL_PERIOD;
        let mut action = expert_action(model, &state, behavior, t)?;
        for (j, a) in action.iter_mut().enumerate() {
            let n = if noise_scale > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *a = model.clamp_to_limits(j, *a + n);
        }
        let next = physim::step(model, &state, &action)?;
        ep.observations.push(observe(&state, model));
        ep.actions.push(action);
        ep.states.push(state);
        state = next;
        if is_fallen(&state, model) {
            ep.terminated_by_fall = true;
            break;
        }
    }
    Ok(ep)
}

/// Deterministic per-episode seed: `seed` plus a stable hash of the
/// behavior name and rollout index.
pub fn episode_seed(seed: u64, behavior: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(behavior.as_bytes());
    h.update([0u8]);
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    seed.wrapping_add(u64::from_le_bytes(bytes))
}


/// Rolls out every behavior `rollouts_per_behavior` times into a new dataset
/// at `root` and computes its train-split statistics. Rollouts run in
/// parallel; files are written in behavior then index order.
pub fn build_dataset(
    root: impl AsRef<Path>,
    id: &str,
    behaviors: &[BehaviorSpec],
    rollouts_per_behavior: usize,
    noise_scale: f64,
    seed: u64,
    model: &BodyModel,
) -> Result<Dataset, ExpertError> {
    if rollouts_per_behavior == 0 {
        return Err(ExpertError::NoRollouts);
    }
    let mut seen = HashSet::new();
    for b in behaviors {
        if !seen.insert(b.name.as_str()) {
            return Err(ExpertError::DuplicateBehavior(b.name.clone()));
        }
        b.validate(model)?;
    }
    let obs_dim = physim::ObservationLayout::for_model(model).dim();
    let mut w = DatasetWriter::create(root, id, seed, obs_dim, model.action_dim())?;
    for b in behaviors {
        let episodes = (0..rollouts_per_behavior)
            .into_par_iter()
            .map(|i| generate_rollout(b, model, noise_scale, episode_seed(seed, &b.name, i)))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, mut ep) in episodes.into_iter().enumerate() {
            ep.states = Vec::new();
            w.write_episode(&ep, split_for(&b.name, i, rollouts_per_behavior))?;
        }
    }
    Ok(w.finish()?)
}
