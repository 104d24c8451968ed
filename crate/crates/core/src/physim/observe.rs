use serde::{Deserialize, Serialize};

use super::dynamics::{kinematics, SimState, ACTIVATION_EPS};
use super::model::BodyModel;

/// Observation categories in concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    JointPose,
    Velocimeter,
    Gyrometer,
    EndEffectorPose,
    WorldZAxis,
    ActuatorActivation,
    TouchSensors,
    TorqueSensors,
    BodyHeight,
}

impl Observable {
    pub const ALL: [Observable; 9] = [
        Observable::JointPose,
        Observable::Velocimeter,
        Observable::Gyrometer,
        Observable::EndEffectorPose,
        Observable::WorldZAxis,
        Observable::ActuatorActivation,
        Observable::TouchSensors,
        Observable::TorqueSensors,
        Observable::BodyHeight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Observable::JointPose => "joint_pose",
            Observable::Velocimeter => "velocimeter",
            Observable::Gyrometer => "gyrometer",
            Observable::EndEffectorPose => "end_effector_pose",
            Observable::WorldZAxis => "world_z_axis",
            Observable::ActuatorActivation => "actuator_activation",
            Observable::TouchSensors => "touch_sensors",
            Observable::TorqueSensors => "torque_sensors",
            Observable::BodyHeight => "body_height",
        }
    }
}

/// Offsets and widths of each category inside an observation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationLayout {
    pub segments: Vec<(Observable, std::ops::Range<usize>)>,
}

impl ObservationLayout {
    pub fn for_model(model: &BodyModel) -> Self {
        let nj = model.num_joints();
        let feet = model.contact_links().len();
        let mut at = 0;
        let segments = Observable::ALL
            .iter()
            .map(|&o| {
                let width = match o {
                    Observable::JointPose | Observable::ActuatorActivation | Observable::TorqueSensors => nj,
                    Observable::Velocimeter | Observable::WorldZAxis => 2,
                    Observable::Gyrometer | Observable::BodyHeight => 1,
                    Observable::EndEffectorPose => 2 * feet,
                    Observable::TouchSensors => feet,
                };
                let r = at..at + width;
                at += width;
                (o, r)
            })
            .collect();
        Self { segments }
    }

    pub fn dim(&self) -> usize {
        self.segments.last().map_or(0, |(_, r)| r.end)
    }

    pub fn range(&self, o: Observable) -> std::ops::Range<usize> {
        self.segments
            .iter()
            .find(|(k, _)| *k == o)
            .map(|(_, r)| r.clone())
            .expect("every observable has a segment")
    }

    /// Column names such as `joint_pose_0`, `body_height`.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for (o, r) in &self.segments {
            if r.len() == 1 {
                names.push(o.name().to_string());
            } else {
                names.extend((0..r.len()).map(|i| format!("{}_{i}", o.name())));
            }
        }
        names
    }
}

/// Observation vector with every category in layout order.
pub fn observe(state: &SimState, model: &BodyModel) -> Vec<f64> {
    let k = kinematics(model, state);
    let theta = state.root_angle;
    let root = state.root_pos;
    let (st, ct) = theta.sin_cos();
    // Root frame: first component forward along the torso normal, second up its axis.
    let to_root = |p: [f64; 2]| {
        let d = [p[0] - root[0], p[1] - root[1]];
        [d[0] * ct - d[1] * st, d[0] * st + d[1] * ct]
    };
    let mut out = Vec::with_capacity(ObservationLayout::for_model(model).dim());
    out.extend_from_slice(&state.q);
    out.extend_from_slice(&state.root_vel);
    out.push(state.root_ang_vel);
    for &foot in model.contact_links() {
        out.extend_from_slice(&to_root(k.base[foot]));
    }
    out.extend_from_slice(&[-st, ct]);
    out.extend(
        state
            .commanded_torques
            .iter()
            .map(|t| if t.abs() > ACTIVATION_EPS { 1.0 } else { 0.0 }),
    );
    out.extend_from_slice(&state.contact_forces);
    out.extend_from_slice(&state.torques);
    out.push(state.root_pos[1]);
    out
}

/// Joint-pose slice of an observation.
pub fn joint_pose(obs: &[f64], model: &BodyModel) -> Vec<f64> {
    obs[..model.num_joints()].to_vec()
}

/// True when the root has dropped strictly below the fall threshold.
pub fn is_fallen(state: &SimState, model: &BodyModel) -> bool {
    is_fallen_at(state, model, model.fall_fraction())
}

pub fn is_fallen_at(state: &SimState, model: &BodyModel, fall_fraction: f64) -> bool {
    state.root_pos[1] < fall_fraction * model.standing_height()
}
