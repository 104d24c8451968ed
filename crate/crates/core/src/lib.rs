//! Observation pre-training for motion generation: a planar biped simulator,
//! scripted experts, episode datasets, a small GPT with swappable heads, its
//! trainer, closed-loop rollouts, metrics and the experiment harness.

pub mod dataset;
pub mod experts;
pub mod gptcore;
pub mod harness;
pub mod metrics;
pub mod physim;
pub mod rollout;
pub mod trainer;
