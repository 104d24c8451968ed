//! Reduced-coordinate dynamics for the planar tree.
//!
//! Generalized coordinates are `[x, z, θ, q_0 .. q_{n-1}]` for a floating
//! root, or just the joint angles when the root is pinned. Equations of
//! motion are assembled with Kane's method: every link contributes
//! `m J_cᵀ (J_c q̈ + a_bias)` and `I J_ωᵀ J_ω q̈`, and the system is solved
//! with a Cholesky factorization at each substep.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::model::BodyModel;
use super::SimError;

/// Control rate in Hz.
pub const CONTROL_HZ: f64 = 32.0;
/// Physics substeps per control period.
pub const SUBSTEPS: usize = 8;
/// Seconds per control step.
pub const CONTROL_PERIOD: f64 = 1.0 / CONTROL_HZ;
/// Threshold above which an actuator counts as active, N·m.
pub const ACTIVATION_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// Root (pelvis) position (x, z), m.
    pub root_pos: [f64; 2],
    /// Root orientation, rad.
    pub root_angle: f64,
    /// m/s
    pub root_vel: [f64; 2],
    /// rad/s
    pub root_ang_vel: f64,
    /// Joint angles, rad.
    pub q: Vec<f64>,
    /// Joint velocities, rad/s.
    pub qd: Vec<f64>,
    /// Normal contact force per contact link at the last substep, N.
    pub contact_forces: Vec<f64>,
    /// Torque applied at the last substep, N·m.
    pub torques: Vec<f64>,
    /// Torque commanded by the PD law before clamping at the last substep.
    pub commanded_torques: Vec<f64>,
    /// Tangential spring anchor (world x) per contact point while touching.
    pub anchors: Vec<Option<f64>>,
    /// Control steps taken since reset.
    pub steps: u64,
    /// s
    pub time: f64,
}

/// Initial configuration handed to [`reset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub root_pos: [f64; 2],
    pub root_angle: f64,
    pub joints: Vec<f64>,
    #[serde(default)]
    pub root_vel: [f64; 2],
    #[serde(default)]
    pub root_ang_vel: f64,
    #[serde(default)]
    pub joint_vel: Option<Vec<f64>>,
}

impl Pose {
    pub fn at_rest(root_pos: [f64; 2], root_angle: f64, joints: Vec<f64>) -> Self {
        Self {
            root_pos,
            root_angle,
            joints,
            root_vel: [0.0; 2],
            root_ang_vel: 0.0,
            joint_vel: None,
        }
    }

    /// Upright standing pose with the root at the model's standing height.
    pub fn standing(model: &BodyModel) -> Self {
        Self::at_rest([0.0, model.standing_height()], 0.0, model.standing_pose())
    }
}

#[inline]
pub(crate) fn axis(phi: f64) -> [f64; 2] {
    [phi.sin(), phi.cos()]
}

#[inline]
pub(crate) fn normal(phi: f64) -> [f64; 2] {
    [phi.cos(), -phi.sin()]
}

#[inline]
fn local_to_world(phi: f64, p: [f64; 2]) -> [f64; 2] {
    let (u, n) = (axis(phi), normal(phi));
    [p[0] * u[0] + p[1] * n[0], p[0] * u[1] + p[1] * n[1]]
}

/// Derivative of a rigidly attached vector with respect to its link angle.
#[inline]
fn perp(v: [f64; 2]) -> [f64; 2] {
    [v[1], -v[0]]
}

/// Per-link positions, angles and velocity-product accelerations.
#[derive(Clone, Debug)]
pub(crate) struct Kinematics {
    pub angle: Vec<f64>,
    pub omega: Vec<f64>,
    /// Proximal joint position of each link (root position for the root).
    pub base: Vec<[f64; 2]>,
    /// Velocity-product acceleration of each link base.
    pub base_bias: Vec<[f64; 2]>,
}

pub(crate) fn kinematics(model: &BodyModel, s: &SimState) -> Kinematics {
    let nl = model.links().len();
    let root = model.root();
    let mut k = Kinematics {
        angle: vec![0.0; nl],
        omega: vec![0.0; nl],
        base: vec![[0.0; 2]; nl],
        base_bias: vec![[0.0; 2]; nl],
    };
    k.angle[root] = s.root_angle;
    k.omega[root] = s.root_ang_vel;
    k.base[root] = s.root_pos;
    for &j in model.joint_order() {
        let joint = &model.joints()[j];
        let (p, c) = (joint.parent, joint.child);
        let r = local_to_world(k.angle[p], model.anchor(j));
        k.angle[c] = k.angle[p] + s.q[j];
        k.omega[c] = k.omega[p] + s.qd[j];
        k.base[c] = [k.base[p][0] + r[0], k.base[p][1] + r[1]];
        let w2 = k.omega[p] * k.omega[p];
        k.base_bias[c] = [k.base_bias[p][0] - r[0] * w2, k.base_bias[p][1] - r[1] * w2];
    }
    k
}

impl Kinematics {
    pub fn point(&self, link: usize, local: [f64; 2]) -> [f64; 2] {
        let r = local_to_world(self.angle[link], local);
        [self.base[link][0] + r[0], self.base[link][1] + r[1]]
    }

    fn point_bias(&self, link: usize, local: [f64; 2]) -> [f64; 2] {
        let r = local_to_world(self.angle[link], local);
        let w2 = self.omega[link] * self.omega[link];
        [self.base_bias[link][0] - r[0] * w2, self.base_bias[link][1] - r[1] * w2]
    }
}

/// Number of generalized coordinates.
pub(crate) fn dof(model: &BodyModel) -> usize {
    model.num_joints() + if model.pinned_root() { 0 } else { 3 }
}

/// Linear Jacobian of a world point attached to `link`, one column per coordinate.
fn point_jacobian(model: &BodyModel, k: &Kinematics, link: usize, p: [f64; 2], out: &mut [[f64; 2]]) {
    let off = if model.pinned_root() { 0 } else { 3 };
    out.iter_mut().for_each(|c| *c = [0.0; 2]);
    if off == 3 {
        let root = k.base[model.root()];
        out[0] = [1.0, 0.0];
        out[1] = [0.0, 1.0];
        out[2] = perp([p[0] - root[0], p[1] - root[1]]);
    }
    for &j in model.path(link) {
        let pj = k.base[model.joints()[j].child];
        out[off + j] = perp([p[0] - pj[0], p[1] - pj[1]]);
    }
}

/// Angular Jacobian row of `link`: which coordinates rotate it.
fn angular_row(model: &BodyModel, link: usize, out: &mut [f64]) {
    let off = if model.pinned_root() { 0 } else { 3 };
    out.iter_mut().for_each(|c| *c = 0.0);
    if off == 3 {
        out[2] = 1.0;
    }
    for &j in model.path(link) {
        out[off + j] = 1.0;
    }
}

fn velocities(model: &BodyModel, s: &SimState) -> Vec<f64> {
    let mut v = Vec::with_capacity(dof(model));
    if !model.pinned_root() {
        v.extend_from_slice(&[s.root_vel[0], s.root_vel[1], s.root_ang_vel]);
    }
    v.extend_from_slice(&s.qd);
    v
}

fn mass_matrix(model: &BodyModel, k: &Kinematics) -> DMatrix<f64> {
    let n = dof(model);
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut jac = vec![[0.0; 2]; n];
    let mut row = vec![0.0; n];
    for (l, link) in model.links().iter().enumerate() {
        let c = k.point(l, link.com_local());
        point_jacobian(model, k, l, c, &mut jac);
        angular_row(model, l, &mut row);
        for a in 0..n {
            for b in a..n {
                let v = link.mass * (jac[a][0] * jac[b][0] + jac[a][1] * jac[b][1]) + link.inertia * row[a] * row[b];
                m[(a, b)] += v;
            }
        }
    }
    let off = n - model.num_joints();
    for (j, joint) in model.joints().iter().enumerate() {
        m[(off + j, off + j)] += joint.armature;
    }
    for a in 0..n {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    m
}

/// Kinetic plus gravitational potential energy (z = 0 reference), J.
pub fn mechanical_energy(model: &BodyModel, s: &SimState) -> f64 {
    let k = kinematics(model, s);
    let v = DVector::from_vec(velocities(model, s));
    let m = mass_matrix(model, &k);
    let kinetic = 0.5 * v.dot(&(&m * &v));
    let potential: f64 = model
        .links()
        .iter()
        .enumerate()
        .map(|(l, link)| link.mass * model.gravity() * k.point(l, link.com_local())[1])
        .sum();
    kinetic + potential
}

/// Whole-body center of mass position and velocity in world coordinates.
pub fn center_of_mass(model: &BodyModel, s: &SimState) -> ([f64; 2], [f64; 2]) {
    let k = kinematics(model, s);
    let v = velocities(model, s);
    let mut jac = vec![[0.0; 2]; v.len()];
    let (mut p, mut pv, mut total) = ([0.0; 2], [0.0; 2], 0.0);
    for (l, link) in model.links().iter().enumerate() {
        let c = k.point(l, link.com_local());
        point_jacobian(model, &k, l, c, &mut jac);
        for (col, &vi) in jac.iter().zip(&v) {
            pv[0] += link.mass * col[0] * vi;
            pv[1] += link.mass * col[1] * vi;
        }
        p[0] += link.mass * c[0];
        p[1] += link.mass * c[1];
        total += link.mass;
    }
    ([p[0] / total, p[1] / total], [pv[0] / total, pv[1] / total])
}

/// World position of every contact point.
pub fn contact_point_positions(model: &BodyModel, s: &SimState) -> Vec<[f64; 2]> {
    let k = kinematics(model, s);
    model.contact_points().iter().map(|&(l, p)| k.point(l, p)).collect()
}

/// Builds the state for `pose` at time zero.
pub fn reset(model: &BodyModel, pose: &Pose) -> Result<SimState, SimError> {
    let nj = model.num_joints();
    if pose.joints.len() != nj {
        return Err(SimError::DimensionMismatch {
            what: "pose joints",
            expected: nj,
            got: pose.joints.len(),
        });
    }
    for (j, (&q, joint)) in pose.joints.iter().zip(model.joints()).enumerate() {
        if !q.is_finite() {
            return Err(SimError::NonFinite { field: format!("pose.joints[{j}]") });
        }
        if q < joint.lower || q > joint.upper {
            return Err(SimError::LimitViolation {
                joint: joint.name.clone(),
                value: q,
                lower: joint.lower,
                upper: joint.upper,
            });
        }
    }
    let qd = pose.joint_vel.clone().unwrap_or_else(|| vec![0.0; nj]);
    if qd.len() != nj {
        return Err(SimError::DimensionMismatch {
            what: "pose joint velocities",
            expected: nj,
            got: qd.len(),
        });
    }
    let mut s = SimState {
        root_pos: pose.root_pos,
        root_angle: pose.root_angle,
        root_vel: pose.root_vel,
        root_ang_vel: pose.root_ang_vel,
        q: pose.joints.clone(),
        qd,
        contact_forces: vec![0.0; model.contact_links().len()],
        torques: vec![0.0; nj],
        commanded_torques: vec![0.0; nj],
        anchors: vec![None; model.contact_points().len()],
        steps: 0,
        time: 0.0,
    };
    check_finite(&s)?;
    let k = kinematics(model, &s);
    let v = velocities(model, &s);
    let (_, normals) = contact_forces(model, &k, &v, &mut s.anchors);
    s.contact_forces = normals;
    Ok(s)
}

pub(crate) fn check_finite(s: &SimState) -> Result<(), SimError> {
    let scalars = [
        ("root_pos.x", s.root_pos[0]),
        ("root_pos.z", s.root_pos[1]),
        ("root_angle", s.root_angle),
        ("root_vel.x", s.root_vel[0]),
        ("root_vel.z", s.root_vel[1]),
        ("root_ang_vel", s.root_ang_vel),
        ("time", s.time),
    ];
    for (name, v) in scalars {
        if !v.is_finite() {
            return Err(SimError::NonFinite { field: name.to_string() });
        }
    }
    for (name, vec) in [("q", &s.q), ("qd", &s.qd), ("torques", &s.torques)] {
        if let Some(i) = vec.iter().position(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { field: format!("{name}[{i}]") });
        }
    }
    Ok(())
}

/// World force at one contact point and which of its spring-dampers are
/// unsaturated (and therefore linear in the state).
#[derive(Clone, Copy, Debug, Default)]
struct PointForce {
    f: [f64; 2],
    normal_live: bool,
    tangent_live: bool,
}

/// Penalty contact: returns per-point forces and per-link normal totals,
/// updating tangential anchors in place.
fn contact_forces(
    model: &BodyModel,
    k: &Kinematics,
    v: &[f64],
    anchors: &mut [Option<f64>],
) -> (Vec<PointForce>, Vec<f64>) {
    let params = model.contact();
    let n = v.len();
    let mut jac = vec![[0.0; 2]; n];
    let mut forces = Vec::with_capacity(model.contact_points().len());
    let mut normals = vec![0.0; model.contact_links().len()];
    for (i, &(link, local)) in model.contact_points().iter().enumerate() {
        let p = k.point(link, local);
        if p[1] >= 0.0 {
            anchors[i] = None;
            forces.push(PointForce::default());
            continue;
        }
        point_jacobian(model, k, link, p, &mut jac);
        let (mut vx, mut vz) = (0.0, 0.0);
        for (col, &vi) in jac.iter().zip(v) {
            vx += col[0] * vi;
            vz += col[1] * vi;
        }
        let fz_raw = -params.stiffness * p[1] - params.damping * vz;
        let fz = fz_raw.max(0.0);
        let anchor = *anchors[i].get_or_insert(p[0]);
        let mut fx = -params.stiffness * (p[0] - anchor) - params.damping * vx;
        let cap = params.friction * fz;
        let tangent_live = fx.abs() <= cap;
        if !tangent_live {
            fx = cap.copysign(fx);
            // Slide the anchor so the spring-damper reproduces the clamped force.
            anchors[i] = Some(p[0] + (fx + params.damping * vx) / params.stiffness);
        }
        forces.push(PointForce {
            f: [fx, fz],
            normal_live: fz_raw > 0.0,
            tangent_live,
        });
        let slot = model.contact_links().iter().position(|&l| l == link).expect("contact link indexed");
        normals[slot] += fz;
    }
    (forces, normals)
}

/// Stops joints that would cross a limit this substep.
///
/// Each blocked joint receives a generalized impulse `M⁻¹ eⱼ λⱼ` chosen so its
/// velocity becomes zero; the impulse acts on the whole tree, so momentum is
/// exchanged with the rest of the body instead of being discarded. Joints whose
/// impulse would pull toward the limit are released and the set is re-solved.
fn limit_impulses(
    model: &BodyModel,
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    q: &[f64],
    dt: f64,
    off: usize,
    vel: &mut DVector<f64>,
) {
    let n = vel.len();
    let mut active: Vec<usize> = model
        .joints()
        .iter()
        .enumerate()
        .filter(|(j, joint)| {
            let qd = vel[off + j];
            let next = q[*j] + dt * qd;
            (next < joint.lower && qd < 0.0) || (next > joint.upper && qd > 0.0)
        })
        .map(|(j, _)| j)
        .collect();
    while !active.is_empty() {
        let cols: Vec<DVector<f64>> = active
            .iter()
            .map(|&j| {
                let mut e = DVector::zeros(n);
                e[off + j] = 1.0;
                chol.solve(&e)
            })
            .collect();
        let k = active.len();
        let a = DMatrix::from_fn(k, k, |r, c| cols[c][off + active[r]]);
        let b = DVector::from_fn(k, |r, _| -vel[off + active[r]]);
        let Some(lambda) = a.cholesky().map(|c| c.solve(&b)) else {
            break;
        };
        // A joint at its lower limit may only be pushed up, and vice versa.
        let bad = active.iter().zip(lambda.iter()).position(|(&j, &l)| {
            let at_lower = q[j] + dt * vel[off + j] < model.joints()[j].lower;
            if at_lower {
                l < 0.0
            } else {
                l > 0.0
            }
        });
        match bad {
            Some(i) => {
                active.remove(i);
            }
            None => {
                for (col, l) in cols.iter().zip(lambda.iter()) {
                    vel.axpy(*l, col, 1.0);
                }
                break;
            }
        }
    }
}

/// Advances one control period with `action` as PD joint targets.
pub fn step(model: &BodyModel, state: &SimState, action: &[f64]) -> Result<SimState, SimError> {
    let nj = model.num_joints();
    if action.len() != nj {
        return Err(SimError::DimensionMismatch {
            what: "action",
            expected: nj,
            got: action.len(),
        });
    }
    if let Some(i) = action.iter().position(|a| !a.is_finite()) {
        return Err(SimError::NonFinite { field: format!("action[{i}]") });
    }
    check_finite(state)?;
    if state.q.len() != nj || state.qd.len() != nj {
        return Err(SimError::DimensionMismatch {
            what: "state joints",
            expected: nj,
            got: state.q.len().min(state.qd.len()),
        });
    }
    let targets: Vec<f64> = action.iter().enumerate().map(|(j, &a)| model.clamp_to_limits(j, a)).collect();
    let dt = CONTROL_PERIOD / SUBSTEPS as f64;
    let n = dof(model);
    let off = n - nj;
    let mut s = state.clone();
    let mut jac = vec![[0.0; 2]; n];
    for _ in 0..SUBSTEPS {
        let k = kinematics(model, &s);
        let v = velocities(model, &s);
        let m = mass_matrix(model, &k);
        let mut rhs = DVector::<f64>::zeros(n);

        // Gravity and velocity-product terms.
        for (l, link) in model.links().iter().enumerate() {
            let local = link.com_local();
            let c = k.point(l, local);
            let bias = k.point_bias(l, local);
            point_jacobian(model, &k, l, c, &mut jac);
            let f = [-link.mass * bias[0], link.mass * (-model.gravity() - bias[1])];
            for (a, col) in jac.iter().enumerate() {
                rhs[a] += col[0] * f[0] + col[1] * f[1];
            }
        }

        // PD actuation. Unsaturated actuators and contacts enter the solve
        // linearly implicitly: their stiffness and damping are folded into
        // the iteration matrix as dt·D + dt²·K.
        let mut m = m;
        for (j, joint) in model.joints().iter().enumerate() {
            let cmd = joint.kp * (targets[j] - s.q[j]) - joint.kd * s.qd[j];
            let tau = cmd.clamp(-joint.torque_limit, joint.torque_limit);
            s.commanded_torques[j] = cmd;
            s.torques[j] = tau;
            rhs[off + j] += tau;
            if cmd.abs() <= joint.torque_limit {
                m[(off + j, off + j)] += dt * joint.kd + dt * dt * joint.kp;
            }
        }

        // Ground contact.
        let params = model.contact();
        let gain = dt * params.damping + dt * dt * params.stiffness;
        let (forces, normals) = contact_forces(model, &k, &v, &mut s.anchors);
        for (&(link, local), pf) in model.contact_points().iter().zip(&forces) {
            if !(pf.normal_live || pf.tangent_live) && pf.f == [0.0; 2] {
                continue;
            }
            let p = k.point(link, local);
            point_jacobian(model, &k, link, p, &mut jac);
            for (a, col) in jac.iter().enumerate() {
                rhs[a] += col[0] * pf.f[0] + col[1] * pf.f[1];
            }
            for a in 0..n {
                for b in 0..n {
                    let mut g = 0.0;
                    if pf.tangent_live {
                        g += jac[a][0] * jac[b][0];
                    }
                    if pf.normal_live {
                        g += jac[a][1] * jac[b][1];
                    }
                    m[(a, b)] += gain * g;
                }
            }
        }
        s.contact_forces = normals;

        let chol = m
            .cholesky()
            .ok_or_else(|| SimError::NonFinite { field: "mass matrix".into() })?;
        let acc = chol.solve(&rhs);

        // Semi-implicit Euler: velocities first, then positions with the new velocities.
        let mut vel = DVector::from_vec(v);
        vel.axpy(dt, &acc, 1.0);
        limit_impulses(model, &chol, &s.q, dt, off, &mut vel);
        if off == 3 {
            s.root_vel = [vel[0], vel[1]];
            s.root_ang_vel = vel[2];
            s.root_pos[0] += dt * vel[0];
            s.root_pos[1] += dt * vel[1];
            s.root_angle += dt * vel[2];
        }
        for (j, joint) in model.joints().iter().enumerate() {
            s.qd[j] = vel[off + j];
            s.q[j] = (s.q[j] + dt * s.qd[j]).clamp(joint.lower, joint.upper);
        }
    }
    s.steps = state.steps + 1;
    s.time = s.steps as f64 * CONTROL_PERIOD;
    check_finite(&s)?;
    Ok(s)
}
