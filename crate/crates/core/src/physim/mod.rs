//! Deterministic planar articulated-humanoid simulator.
//!
//! Position-controlled PD actuators, penalty ground contact with a Coulomb
//! friction clamp, semi-implicit Euler integration at [`SUBSTEPS`] substeps
//! per [`CONTROL_PERIOD`]. All arithmetic is `f64`.

mod dynamics;
mod model;
mod observe;
mod render;

pub use dynamics::{
    center_of_mass, contact_point_positions, mechanical_energy, reset, step, Pose, SimState, ACTIVATION_EPS, CONTROL_HZ,
    CONTROL_PERIOD, SUBSTEPS,
};
pub use model::{BodyModel, BodySpec, ContactParams, Joint, Link};
pub use observe::{is_fallen, is_fallen_at, joint_pose, observe, Observable, ObservationLayout};
pub use render::render_svg;

pub(crate) use model::{ANKLE_HEIGHT, BIPED_STANDING_POSE, SHIN_LENGTH, THIGH_LENGTH};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("joint `{joint}` angle {value} outside limits [{lower}, {upper}]")]
    LimitViolation {
        joint: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("non-finite value in {field}")]
    NonFinite { field: String },
    #[error("{what}: expected {expected} values, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid body model: {0}")]
    InvalidModel(String),
    #[error("cannot render an empty state sequence")]
    EmptySequence,
}

#[cfg(test)]
mod tests;
