//! Body description for the planar articulated humanoid.
//!
//! Angles follow a relative link-axis convention: every link has an axis
//! running from its proximal joint to its distal end, and a joint angle is
//! the rotation of the child axis relative to the parent axis. An absolute
//! angle of zero points straight up and positive angles rotate toward +x
//! (forward), so the unit axis of a link at absolute angle `phi` is
//! `(sin phi, cos phi)` and its normal is `(cos phi, -sin phi)`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::SimError;

/// A rigid link. Local coordinates `[a, b]` are measured along the link
/// axis (`a`) and along its normal (`b`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub name: String,
    /// kg
    pub mass: f64,
    /// m
    pub length: f64,
    /// kg·m² about the centre of mass
    pub inertia: f64,
    /// Centre of mass in link coordinates; defaults to the axis midpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub com: Option<[f64; 2]>,
    /// Ground contact points in link coordinates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contacts: Vec<[f64; 2]>,
}

impl Link {
    pub fn com_local(&self) -> [f64; 2] {
        self.com.unwrap_or([0.5 * self.length, 0.0])
    }
}

/// A position-controlled revolute joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: usize,
    pub child: usize,
    /// Attachment point on the parent link; defaults to the parent's distal end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<[f64; 2]>,
    /// rad
    pub lower: f64,
    /// rad
    pub upper: f64,
    /// N·m/rad
    pub kp: f64,
    /// N·m·s/rad
    pub kd: f64,
    /// N·m
    pub torque_limit: f64,
    /// Reflected rotor inertia added to the joint's diagonal mass entry, kg·m².
    #[serde(default)]
    pub armature: f64,
}

/// Penalty contact parameters shared by every contact point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactParams {
    /// N/m
    pub stiffness: f64,
    /// N·s/m
    pub damping: f64,
    /// Coulomb coefficient
    pub friction: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            stiffness: 1.0e5,
            damping: 5.0e2,
            friction: 1.0,
        }
    }
}

fn default_gravity() -> f64 {
    9.81
}

fn default_fall_fraction() -> f64 {
    0.6
}

/// JSON form of a body model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub root: usize,
    /// Root height of the standing pose, m.
    pub standing_height: f64,
    /// m/s², acting along −z.
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default = "default_fall_fraction")]
    pub fall_fraction: f64,
    /// Root is held fixed; only joint coordinates evolve.
    #[serde(default)]
    pub pinned_root: bool,
    #[serde(default)]
    pub contact: ContactParams,
    /// Joint angles of the standing pose; defaults to all zeros.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standing_pose: Option<Vec<f64>>,
}

/// A validated body model with precomputed tree topology.
#[derive(Clone, Debug)]
pub struct BodyModel {
    spec: BodySpec,
    /// Joints in root-to-leaf order.
    order: Vec<usize>,
    /// Joint whose child is this link; `None` for the root.
    #[cfg_attr(not(test), allow(dead_code))]
    parent_joint: Vec<Option<usize>>,
    /// For each link, the joints on the path from the root (root first).
    paths: Vec<Vec<usize>>,
    /// Links carrying contact points, in link order.
    contact_links: Vec<usize>,
    /// (link, local point) for every contact point.
    contact_points: Vec<(usize, [f64; 2])>,
}

impl BodyModel {
    pub fn new(spec: BodySpec) -> Result<Self, SimError> {
        let nl = spec.links.len();
        let bad = |msg: String| Err(SimError::InvalidModel(msg));
        if nl == 0 {
            return bad("model has no links".into());
        }
        if spec.root >= nl {
            return bad(format!("root index {} out of range", spec.root));
        }
        for l in &spec.links {
            if !(l.mass > 0.0 && l.length > 0.0 && l.inertia > 0.0) {
                return bad(format!("link `{}` needs positive mass, length and inertia", l.name));
            }
            let finite = l.com_local().iter().chain(l.contacts.iter().flatten()).all(|v| v.is_finite());
            if !finite {
                return bad(format!("link `{}` has non-finite geometry", l.name));
            }
        }
        let mut parent_joint = vec![None; nl];
        for (j, joint) in spec.joints.iter().enumerate() {
            if joint.parent >= nl || joint.child >= nl {
                return bad(format!("joint `{}` references a missing link", joint.name));
            }
            if joint.child == spec.root || joint.parent == joint.child {
                return bad(format!("joint `{}` breaks the tree rooted at link {}", joint.name, spec.root));
            }
            if parent_joint[joint.child].is_some() {
                return bad(format!("link {} has more than one parent joint", joint.child));
            }
            if joint.lower.partial_cmp(&joint.upper) != Some(std::cmp::Ordering::Less) {
                return bad(format!("joint `{}` needs lower < upper", joint.name));
            }
            if !(joint.kp >= 0.0 && joint.kd >= 0.0 && joint.torque_limit >= 0.0 && joint.armature >= 0.0) {
                return bad(format!("joint `{}` has negative gains or limits", joint.name));
            }
            parent_joint[joint.child] = Some(j);
        }
        if spec.joints.len() != nl - 1 {
            return bad(format!("{} links need {} joints, found {}", nl, nl - 1, spec.joints.len()));
        }
        // Breadth-first from the root; every link must be reached exactly once.
        let mut order = Vec::with_capacity(spec.joints.len());
        let mut paths: Vec<Vec<usize>> = vec![Vec::new(); nl];
        let mut reached = vec![false; nl];
        reached[spec.root] = true;
        let mut frontier = vec![spec.root];
        while let Some(link) = frontier.pop() {
            for (j, joint) in spec.joints.iter().enumerate() {
                if joint.parent == link {
                    if reached[joint.child] {
                        return bad(format!("joint `{}` closes a loop", joint.name));
                    }
                    reached[joint.child] = true;
                    let mut path = paths[link].clone();
                    path.push(j);
                    paths[joint.child] = path;
                    order.push(j);
                    frontier.push(joint.child);
                }
            }
        }
        if reached.iter().any(|r| !r) {
            return bad("link graph is not connected to the root".into());
        }
        // Frontier popping visits parents before children, but sort by depth so
        // the order is independent of how joints were listed.
        order.sort_by_key(|&j| (paths[spec.joints[j].child].len(), j));
        if spec.standing_height.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !spec.gravity.is_finite() {
            return bad("standing_height must be positive and gravity finite".into());
        }
        if !(spec.fall_fraction > 0.0 && spec.fall_fraction < 1.0) {
            return bad("fall_fraction must lie in (0, 1)".into());
        }
        if let Some(pose) = &spec.standing_pose {
            if pose.len() != spec.joints.len() {
                return bad("standing_pose has the wrong length".into());
            }
        }
        let c = spec.contact;
        if !(c.stiffness > 0.0 && c.damping >= 0.0 && c.friction >= 0.0) {
            return bad("contact parameters must be non-negative with positive stiffness".into());
        }
        let contact_links: Vec<usize> = (0..nl).filter(|&l| !spec.links[l].contacts.is_empty()).collect();
        let contact_points = contact_links
            .iter()
            .flat_map(|&l| spec.links[l].contacts.iter().map(move |p| (l, *p)))
            .collect();
        Ok(Self {
            spec,
            order,
            parent_joint,
            paths,
            contact_links,
            contact_points,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let spec: BodySpec = serde_json::from_str(text).map_err(|e| SimError::InvalidModel(e.to_string()))?;
        Self::new(spec)
    }

    /// Parses a model from raw bytes. Never panics on malformed input.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, SimError> {
        let text = std::str::from_utf8(bytes).map_err(|e| SimError::InvalidModel(e.to_string()))?;
        Self::from_json(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("body spec serializes")
    }

    pub fn spec(&self) -> &BodySpec {
        &self.spec
    }

    pub fn links(&self) -> &[Link] {
        &self.spec.links
    }

    pub fn joints(&self) -> &[Joint] {
        &self.spec.joints
    }

    pub fn num_joints(&self) -> usize {
        self.spec.joints.len()
    }

    /// Actuated joints; also the action dimensionality.
    pub fn action_dim(&self) -> usize {
        self.spec.joints.len()
    }

    pub fn root(&self) -> usize {
        self.spec.root
    }

    pub fn gravity(&self) -> f64 {
        self.spec.gravity
    }

    pub fn standing_height(&self) -> f64 {
        self.spec.standing_height
    }

    pub fn fall_fraction(&self) -> f64 {
        self.spec.fall_fraction
    }

    pub fn pinned_root(&self) -> bool {
        self.spec.pinned_root
    }

    pub fn contact(&self) -> ContactParams {
        self.spec.contact
    }

    pub fn standing_pose(&self) -> Vec<f64> {
        self.spec
            .standing_pose
            .clone()
            .unwrap_or_else(|| vec![0.0; self.spec.joints.len()])
    }

    pub fn total_mass(&self) -> f64 {
        self.spec.links.iter().map(|l| l.mass).sum()
    }

    pub(crate) fn joint_order(&self) -> &[usize] {
        &self.order
    }

    #[cfg(test)]
    pub(crate) fn parent_joint(&self, link: usize) -> Option<usize> {
        self.parent_joint[link]
    }

    pub(crate) fn path(&self, link: usize) -> &[usize] {
        &self.paths[link]
    }

    pub fn contact_links(&self) -> &[usize] {
        &self.contact_links
    }

    pub(crate) fn contact_points(&self) -> &[(usize, [f64; 2])] {
        &self.contact_points
    }

    pub(crate) fn anchor(&self, joint: usize) -> [f64; 2] {
        let j = &self.spec.joints[joint];
        j.anchor.unwrap_or([self.spec.links[j.parent].length, 0.0])
    }

    pub fn clamp_to_limits(&self, joint: usize, angle: f64) -> f64 {
        let j = &self.spec.joints[joint];
        angle.clamp(j.lower, j.upper)
    }

    /// The shipped planar biped: torso, two legs of thigh, shin and foot.
    ///
    /// Joint order is hip_l, knee_l, ankle_l, hip_r, knee_r, ankle_r. The
    /// standing pose has the legs straight (hip = π, knee = 0) and the feet
    /// flat (ankle = −π/2).
    pub fn biped() -> Self {
        let spec = biped_spec();
        Self::new(spec).expect("shipped biped is valid")
    }
}

pub(crate) const THIGH_LENGTH: f64 = 0.45;
pub(crate) const SHIN_LENGTH: f64 = 0.45;
pub(crate) const ANKLE_HEIGHT: f64 = 0.07;
pub(crate) const HEEL: f64 = -0.10;
pub(crate) const TOE: f64 = 0.16;

pub(crate) const BIPED_STANDING_POSE: [f64; 6] = [PI, 0.0, -FRAC_PI_2, PI, 0.0, -FRAC_PI_2];

fn biped_spec() -> BodySpec {
    let link = |name: &str, mass: f64, length: f64, com: [f64; 2], inertia: f64, contacts: Vec<[f64; 2]>| Link {
        name: name.into(),
        mass,
        length,
        inertia,
        com: Some(com),
        contacts,
    };
    let foot_contacts = vec![[HEEL, ANKLE_HEIGHT], [TOE, ANKLE_HEIGHT]];
    let links = vec![
        link("torso", 30.0, 0.6, [0.3, 0.0], 1.2, vec![]),
        link("thigh_l", 7.0, THIGH_LENGTH, [0.2, 0.0], 0.12, vec![]),
        link("shin_l", 3.5, SHIN_LENGTH, [0.2, 0.0], 0.06, vec![]),
        link("foot_l", 1.5, 0.2, [0.05, 0.035], 0.008, foot_contacts.clone()),
        link("thigh_r", 7.0, THIGH_LENGTH, [0.2, 0.0], 0.12, vec![]),
        link("shin_r", 3.5, SHIN_LENGTH, [0.2, 0.0], 0.06, vec![]),
        link("foot_r", 1.5, 0.2, [0.05, 0.035], 0.008, foot_contacts),
    ];
    let joint = |name: &str, parent, child, anchor: Option<[f64; 2]>, lower, upper, kp, kd, torque_limit, armature| Joint {
        name: name.into(),
        parent,
        child,
        anchor,
        lower,
        upper,
        kp,
        kd,
        torque_limit,
        armature,
    };
    let hip = (PI - 1.7, PI + 0.5);
    let knee = (0.0, 2.4);
    let ankle = (-FRAC_PI_2 - 0.7, -FRAC_PI_2 + 0.8);
    let mut joints = Vec::new();
    for (side, base) in [("l", 1usize), ("r", 4usize)] {
        joints.push(joint(&format!("hip_{side}"), 0, base, Some([0.0, 0.0]), hip.0, hip.1, 1500.0, 50.0, 350.0, 0.05));
        joints.push(joint(&format!("knee_{side}"), base, base + 1, None, knee.0, knee.1, 2000.0, 60.0, 350.0, 0.05));
        joints.push(joint(&format!("ankle_{side}"), base + 1, base + 2, None, ankle.0, ankle.1, 400.0, 12.0, 250.0, 0.1));
    }
    let geometric = THIGH_LENGTH + SHIN_LENGTH + ANKLE_HEIGHT;
    let mass: f64 = links.iter().map(|l| l.mass).sum();
    let contact = ContactParams::default();
    // Static sink of four equally loaded contact points.
    let sink = mass * 9.81 / (4.0 * contact.stiffness);
    BodySpec {
        links,
        joints,
        root: 0,
        standing_height: geometric - sink,
        gravity: 9.81,
        fall_fraction: 0.6,
        pinned_root: false,
        contact,
        standing_pose: Some(BIPED_STANDING_POSE.to_vec()),
    }
}
