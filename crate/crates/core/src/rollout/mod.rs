//! Motion completion: a one-second prompt, then closed-loop generation in
//! the simulator until the body falls or the episode cap is reached.
//!
//! The simulator is the only source of generated observations. A policy
//! sees the most recent [`PROMPT_STEPS`] observations and returns joint
//! targets, which are clamped to the joint limits before stepping.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError, Split};
use crate::experts::{expert_action, BehaviorSpec, ExpertError, MAX_EPISODE_STEPS};
use crate::gptcore::{Decode, GptError, HeadKind, Mode, ModelCheckpoint};
use crate::physim::{self, is_fallen_at, observe, BodyModel, SimError, SimState, CONTROL_HZ, CONTROL_PERIOD};

/// Prompt length, steps (one second).
pub const PROMPT_STEPS: usize = 32;
/// Generation steps available after the prompt.
pub const GENERATION_CAP: usize = MAX_EPISODE_STEPS - PROMPT_STEPS;

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("prompt must have {expected} steps, got {got}")]
    PromptLength { expected: usize, got: usize },
    #[error("policy needs an action head: {0}")]
    NotAnActionModel(String),
    #[error("unknown behavior `{0}`")]
    UnknownBehavior(String),
    #[error("policy returned {got} values for {expected} joints")]
    ActionWidth { expected: usize, got: usize },
    #[error("policy returned a non-finite action at generation step {0}")]
    NonFiniteAction(usize),
    #[error("fall threshold must lie in (0, 1], got {0}")]
    FallThreshold(f64),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] GptError),
    #[error("results table: {0}")]
    Csv(#[from] csv::Error),
}

/// The first second of a stored episode, replayed in the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionPrompt {
    pub behavior: String,
    pub episode_id: String,
    /// Simulator observations before each prompt step.
    pub observations: Vec<Vec<f64>>,
    /// Simulator states before each prompt step.
    pub states: Vec<SimState>,
    /// State after the last prompt step; generation starts here.
    pub state: SimState,
}

impl MotionPrompt {
    /// Resets to the behavior's initial pose and replays the episode's first
    /// [`PROMPT_STEPS`] stored actions.
    pub fn from_dataset(
        dataset: &Dataset,
        id: &str,
        model: &BodyModel,
        behaviors: &[BehaviorSpec],
    ) -> Result<Self, RolloutError> {
        let entry = dataset.manifest().entry(id)?;
        let behavior = find(behaviors, &entry.behavior)?;
        let frames = dataset.load_frames(id)?;
        if frames.len < PROMPT_STEPS {
            return Err(RolloutError::PromptLength {
                expected: PROMPT_STEPS,
                got: frames.len,
            });
        }
        let actions: Vec<Vec<f64>> = (0..PROMPT_STEPS)
            .map(|t| frames.act_row(t).iter().map(|&v| f64::from(v)).collect())
            .collect();
        Self::replay(behavior, id, &actions, model)
    }

    /// Replays `actions` from the behavior's initial pose.
    pub fn replay(behavior: &BehaviorSpec, id: &str, actions: &[Vec<f64>], model: &BodyModel) -> Result<Self, RolloutError> {
        if actions.len() != PROMPT_STEPS {
            return Err(RolloutError::PromptLength {
                expected: PROMPT_STEPS,
                got: actions.len(),
            });
        }
        let mut state = physim::reset(model, &behavior.initial_pose(model)?)?;
        let mut observations = Vec::with_capacity(PROMPT_STEPS);
        let mut states = Vec::with_capacity(PROMPT_STEPS);
        for a in actions {
            observations.push(observe(&state, model));
            let next = physim::step(model, &state, a)?;
            states.push(state);
            state = next;
        }
        Ok(Self {
            behavior: behavior.name.clone(),
            episode_id: id.into(),
            observations,
            states,
            state,
        })
    }

    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.observations.len() != PROMPT_STEPS {
            return Err(RolloutError::PromptLength {
                expected: PROMPT_STEPS,
                got: self.observations.len(),
            });
        }
        Ok(())
    }
}

fn find<'a>(behaviors: &'a [BehaviorSpec], name: &str) -> Result<&'a BehaviorSpec, RolloutError> {
    behaviors
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| RolloutError::UnknownBehavior(name.into()))
}

/// What a policy sees before each generation step.
pub struct PolicyInput<'a> {
    /// The most recent observations, oldest first, at most
    /// [`PROMPT_STEPS`] rows.
    pub window: &'a [Vec<f64>],
    pub state: &'a SimState,
    /// Seconds since the start of the episode.
    pub time: f64,
    pub behavior: &'a BehaviorSpec,
    pub model: &'a BodyModel,
}

/// Produces joint targets from recent observations.
pub trait ActionPolicy: Sync {
    fn id(&self) -> String;
    fn act(&self, input: &PolicyInput) -> Result<Vec<f64>, RolloutError>;
}

/// Decodes the final-step action distribution of a trained model.
pub struct CheckpointPolicy<'a> {
    pub checkpoint: &'a ModelCheckpoint,
    pub decode: Decode,
    pub name: String,
}

impl<'a> CheckpointPolicy<'a> {
    pub fn new(checkpoint: &'a ModelCheckpoint, name: &str) -> Result<Self, RolloutError> {
        if checkpoint.config.head != HeadKind::Action {
            return Err(RolloutError::NotAnActionModel(name.into()));
        }
        Ok(Self {
            checkpoint,
            decode: Decode::Argmax,
            name: name.into(),
        })
    }
}

impl ActionPolicy for CheckpointPolicy<'_> {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn act(&self, input: &PolicyInput) -> Result<Vec<f64>, RolloutError> {
        let c = self.checkpoint.config.context.min(PROMPT_STEPS);
        let window = &input.window[input.window.len().saturating_sub(c)..];
        let out = self.checkpoint.forward(window, Mode::Eval)?;
        let width = self.checkpoint.config.head_width();
        let last = &out.logits[out.logits.len() - width..];
        Ok(self.checkpoint.decode_step(last, self.decode))
    }
}

/// The noise-free expert, closed loop on the simulator state.
pub struct ExpertPolicy;

impl ActionPolicy for ExpertPolicy {
    fn id(&self) -> String {
        "expert".into()
    }

    fn act(&self, input: &PolicyInput) -> Result<Vec<f64>, RolloutError> {
        Ok(expert_action(input.model, input.state, input.behavior, input.time)?)
    }
}

/// Constant zero joint targets.
pub struct ZeroPolicy;

impl ActionPolicy for ZeroPolicy {
    fn id(&self) -> String {
        "zero".into()
    }

    fn act(&self, input: &PolicyInput) -> Result<Vec<f64>, RolloutError> {
        Ok(vec![0.0; input.model.action_dim()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompletionOptions {
    /// Root height fraction of standing height below which the body has
    /// fallen.
    pub fall_fraction: f64,
    /// Maximum generation steps.
    pub cap: usize,
}

impl CompletionOptions {
    pub fn for_model(model: &BodyModel) -> Self {
        Self {
            fall_fraction: model.fall_fraction(),
            cap: GENERATION_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedEpisode {
    pub behavior: String,
    pub episode_id: String,
    pub policy: String,
    /// Prompt observations, then the observation before each generation
    /// step.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// State before each generation step.
    pub states: Vec<SimState>,
    /// State after the last generation step.
    pub final_state: SimState,
    /// Generation steps taken; the step that ends in a fall counts.
    pub episode_length: usize,
    pub terminated_by_fall: bool,
}

impl GeneratedEpisode {
    /// Observations seen during generation; row `t` is `observe(states[t])`.
    pub fn generated_observations(&self) -> &[Vec<f64>] {
        &self.observations[PROMPT_STEPS..]
    }

    pub fn generation_seconds(&self) -> f64 {
        self.episode_length as f64 / CONTROL_HZ
    }

    pub fn total_seconds(&self) -> f64 {
        (self.episode_length + PROMPT_STEPS) as f64 / CONTROL_HZ
    }
}

/// Generates from `prompt` until a fall or `options.cap` steps.
pub fn motion_completion(
    policy: &dyn ActionPolicy,
    prompt: &MotionPrompt,
    model: &BodyModel,
    behavior: &BehaviorSpec,
    options: CompletionOptions,
) -> Result<GeneratedEpisode, RolloutError> {
    prompt.validate()?;
    if !(options.fall_fraction > 0.0 && options.fall_fraction <= 1.0) {
        return Err(RolloutError::FallThreshold(options.fall_fraction));
    }
    if behavior.name != prompt.behavior {
        return Err(RolloutError::UnknownBehavior(prompt.behavior.clone()));
    }
    let nj = model.action_dim();
    let mut ep = GeneratedEpisode {
        behavior: prompt.behavior.clone(),
        episode_id: prompt.episode_id.clone(),
        policy: policy.id(),
        observations: prompt.observations.clone(),
        actions: Vec::new(),
        states: Vec::new(),
        final_state: prompt.state.clone(),
        episode_length: 0,
        terminated_by_fall: false,
    };
    let mut state = prompt.state.clone();
    if is_fallen_at(&state, model, options.fall_fraction) {
        ep.terminated_by_fall = true;
        ep.final_state = state;
        return Ok(ep);
    }
    for k in 0..options.cap {
        ep.observations.push(observe(&state, model));
        ep.states.push(state.clone());
        let from = ep.observations.len() - PROMPT_STEPS;
        let input = PolicyInput {
            window: &ep.observations[from..],
            state: &state,
            time: (PROMPT_STEPS + k) as f64 * CONTROL_PERIOD,
            behavior,
            model,
        };
        let raw = policy.act(&input)?;
        if raw.len() != nj {
            return Err(RolloutError::ActionWidth {
                expected: nj,
                got: raw.len(),
            });
        }
        if raw.iter().any(|a| !a.is_finite()) {
            return Err(RolloutError::NonFiniteAction(k));
        }
        let action: Vec<f64> = raw.iter().enumerate().map(|(j, &a)| model.clamp_to_limits(j, a)).collect();
        state = physim::step(model, &state, &action)?;
        ep.actions.push(action);
        ep.episode_length = k + 1;
        if is_fallen_at(&state, model, options.fall_fraction) {
            ep.terminated_by_fall = true;
            break;
        }
    }
    ep.final_state = state;
    Ok(ep)
}

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub behavior: String,
    pub episode_id: String,
    pub policy: String,
    pub generation_steps: usize,
    /// Generation-phase length, s.
    pub episode_length: f64,
    /// Prompt plus generation, s.
    pub total_length: f64,
    pub terminated_by_fall: bool,
}

impl From<&GeneratedEpisode> for EvalRow {
    fn from(ep: &GeneratedEpisode) -> Self {
        Self {
            behavior: ep.behavior.clone(),
            episode_id: ep.episode_id.clone(),
            policy: ep.policy.clone(),
            generation_steps: ep.episode_length,
            episode_length: ep.generation_seconds(),
            total_length: ep.total_seconds(),
            terminated_by_fall: ep.terminated_by_fall,
        }
    }
}

/// Motion completion from the prompt of every episode in `split`, in
/// manifest order. Episodes run in parallel.
pub fn batch_generate(
    policy: &dyn ActionPolicy,
    dataset: &Dataset,
    split: Split,
    model: &BodyModel,
    behaviors: &[BehaviorSpec],
    options: CompletionOptions,
) -> Result<Vec<GeneratedEpisode>, RolloutError> {
    let ids: Vec<&str> = dataset.manifest().split(split).map(|e| e.id.as_str()).collect();
    ids.par_iter()
        .map(|id| {
            let prompt = MotionPrompt::from_dataset(dataset, id, model, behaviors)?;
            let behavior = find(behaviors, &prompt.behavior)?;
            motion_completion(policy, &prompt, model, behavior, options)
        })
        .collect()
}

/// Episode-length table for `split`; see [`batch_generate`].
pub fn batch_evaluate(
    policy: &dyn ActionPolicy,
    dataset: &Dataset,
    split: Split,
    model: &BodyModel,
    behaviors: &[BehaviorSpec],
    options: CompletionOptions,
) -> Result<Vec<EvalRow>, RolloutError> {
    Ok(batch_generate(policy, dataset, split, model, behaviors, options)?
        .iter()
        .map(EvalRow::from)
        .collect())
}

pub fn write_table<W: Write>(rows: &[EvalRow], out: W) -> Result<(), RolloutError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// SVG of a generated episode over the open-loop replay of the stored
/// episode's actions as a gray reference.
pub fn render_episode(
    generated: &GeneratedEpisode,
    prompt: &MotionPrompt,
    reference: Option<&[SimState]>,
    model: &BodyModel,
) -> Result<String, RolloutError> {
    let mut states = prompt.states.clone();
    states.extend(generated.states.iter().cloned());
    states.push(generated.final_state.clone());
    Ok(physim::render_svg(&states, model, reference)?)
}

/// States from replaying every stored action of `id` open loop.
pub fn replay_reference(
    dataset: &Dataset,
    id: &str,
    model: &BodyModel,
    behaviors: &[BehaviorSpec],
) -> Result<Vec<SimState>, RolloutError> {
    let behavior = find(behaviors, &dataset.manifest().entry(id)?.behavior)?;
    let frames = dataset.load_frames(id)?;
    let mut state = physim::reset(model, &behavior.initial_pose(model)?)?;
    let mut states = vec![state.clone()];
    for t in 0..frames.len {
        let a: Vec<f64> = frames.act_row(t).iter().map(|&v| f64::from(v)).collect();
        state = physim::step(model, &state, &a)?;
        states.push(state.clone());
    }
    Ok(states)
}
