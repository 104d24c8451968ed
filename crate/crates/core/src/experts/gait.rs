//! Reference construction: foot trajectories in the pelvis frame turned into
//! joint targets by two-link inverse kinematics.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::{BehaviorSpec, Category, Knot};
use crate::physim::{ANKLE_HEIGHT, BIPED_STANDING_POSE, SHIN_LENGTH, THIGH_LENGTH};

/// Piecewise schedule `(t, value)` with cosine easing between points.
pub type Schedule = Vec<(f64, f64)>;

fn eval(s: &Schedule, t: f64) -> f64 {
    match s.iter().position(|&(ti, _)| ti > t) {
        None => s.last().map_or(0.0, |p| p.1),
        Some(0) => s[0].1,
        Some(i) => {
            let (t0, v0) = s[i - 1];
            let (t1, v1) = s[i];
            let u = (t - t0) / (t1 - t0);
            v0 + (v1 - v0) * (0.5 - 0.5 * (PI * u).cos())
        }
    }
}

/// Gait parameters for the stepping generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    /// Stride period, s.
    pub period: f64,
    /// Fraction of the period each foot is on the ground.
    pub duty: f64,
    /// Swing-foot clearance, m.
    pub lift: f64,
    /// Mid-stance ankle position ahead of the pelvis, m.
    pub foot_offset: f64,
    /// Phase of each leg (left, right) at t = 0, in periods.
    pub phase: [f64; 2],
    /// Pelvis speed, m/s.
    pub speed: Schedule,
    /// Pelvis height above the ground, m.
    pub height: Schedule,
    /// Torso pitch, rad (positive leans forward).
    pub lean: Schedule,
    /// Feet stay planted when false.
    pub stepping: bool,
}

impl GaitParams {
    fn pelvis_x(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return eval(&self.speed, 0.0) * t;
        }
        let n = (t * 256.0).ceil().max(1.0) as usize;
        let h = t / n as f64;
        // Trapezoid rule on a 1/256 s grid.
        (0..n)
            .map(|i| 0.5 * h * (eval(&self.speed, i as f64 * h) + eval(&self.speed, (i + 1) as f64 * h)))
            .sum()
    }

    /// Ankle position relative to the pelvis, world-aligned axes.
    fn ankle(&self, leg: usize, t: f64) -> [f64; 2] {
        let drop = -(eval(&self.height, t) - ANKLE_HEIGHT);
        if !self.stepping {
            return [self.foot_offset + self.pelvis_x(0.0) - self.pelvis_x(t), drop];
        }
        let (tp, d) = (self.period, self.duty);
        let o = self.phase[leg];
        let cycle = (t / tp + o).floor();
        let phi = t / tp + o - cycle;
        let touchdown = |c: f64| (c - o) * tp;
        let planted = |c: f64| self.pelvis_x(touchdown(c) + 0.5 * d * tp) + self.foot_offset;
        let x = self.pelvis_x(t);
        if phi < d {
            [planted(cycle) - x, drop]
        } else {
            let u = (phi - d) / (1.0 - d);
            let e = 0.5 - 0.5 * (PI * u).cos();
            let from = planted(cycle);
            let to = planted(cycle + 1.0);
            [from + (to - from) * e - x, drop + self.lift * (PI * u).sin()]
        }
    }

    /// Joint targets `[hip, knee, ankle] × (left, right)` at time `t`.
    pub fn targets(&self, t: f64) -> Vec<f64> {
        let lean = eval(&self.lean, t);
        let mut out = Vec::with_capacity(6);
        for leg in 0..2 {
            out.extend_from_slice(&leg_ik(self.ankle(leg, t), lean));
        }
        out
    }
}

/// Hip, knee and ankle angles placing the ankle at `d` (relative to the
/// hip, world-aligned) with the torso pitched by `lean` and the foot flat.
pub(crate) fn leg_ik(d: [f64; 2], lean: f64) -> [f64; 3] {
    let (l1, l2) = (THIGH_LENGTH, SHIN_LENGTH);
    let r = (d[0] * d[0] + d[1] * d[1]).sqrt().min(l1 + l2);
    let cos_k = ((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let knee = cos_k.acos();
    // Link axes point along (sin φ, cos φ); φ = π is straight down.
    let reach = PI + (-d[0]).atan2(-d[1]);
    let thigh = reach - (l2 * knee.sin()).atan2(l1 + l2 * knee.cos());
    let hip = thigh - lean;
    let ankle = FRAC_PI_2 - thigh - knee;
    [hip, knee, ankle]
}

fn stepping_behavior(name: &str, category: Category, g: &GaitParams, duration: f64, cyclic: bool) -> BehaviorSpec {
    let (period, step) = if cyclic {
        (Some(g.period), g.period / 16.0)
    } else {
        (None, 0.125)
    };
    let span = period.unwrap_or(duration);
    let n = (span / step).round() as usize + usize::from(!cyclic);
    let knots = (0..n)
        .map(|i| {
            let t = i as f64 * step;
            Knot {
                t,
                targets: g.targets(t),
                root_velocity: eval(&g.speed, t),
                lean: eval(&g.lean, t),
            }
        })
        .collect();
    BehaviorSpec {
        name: name.into(),
        category,
        duration,
        period,
        knots,
    }
}

/// Direction-reversal schedule standing in for random turns.
fn turn_schedule(speed: f64, duration: f64) -> Schedule {
    // Fixed segment lengths so the library is reproducible.
    let segments = [2.5, 1.75, 3.0, 2.0, 2.25, 1.5, 2.5];
    let ramp = 0.5;
    let mut out = vec![(0.0, speed)];
    let (mut t, mut sign) = (0.0, 1.0);
    for seg in segments {
        t += seg;
        if t >= duration {
            break;
        }
        out.push((t, sign * speed));
        sign = -sign;
        out.push((t + ramp, sign * speed));
    }
    out
}

fn walk(speed: f64) -> GaitParams {
    GaitParams {
        period: 1.2,
        duty: 0.65,
        lift: 0.05,
        foot_offset: 0.0,
        phase: [0.0, 0.5],
        speed: vec![(0.0, speed)],
        height: vec![(0.0, 0.94)],
        lean: vec![(0.0, 0.0)],
        stepping: true,
    }
}

/// The shipped behaviors, in manifest order.
pub fn library() -> Vec<BehaviorSpec> {
    let duration = 15.0;
    let stand = BehaviorSpec {
        name: "stand".into(),
        category: Category::NonCyclic,
        duration,
        period: None,
        knots: vec![Knot {
            t: 0.0,
            targets: BIPED_STANDING_POSE.to_vec(),
            root_velocity: 0.0,
            lean: 0.0,
        }],
    };
    let run = GaitParams {
        period: 0.6,
        duty: 0.6,
        lift: 0.04,
        speed: vec![(0.0, 0.2)],
        lean: vec![(0.0, 0.1)],
        ..walk(0.0)
    };
    let gallop = GaitParams {
        phase: [0.0, 0.4],
        duty: 0.65,
        ..run.clone()
    };
    let turns = GaitParams {
        speed: turn_schedule(0.1, duration),
        ..walk(0.0)
    };
    let march = GaitParams {
        period: 1.0,
        lift: 0.06,
        ..walk(0.0)
    };
    let sway = GaitParams {
        stepping: false,
        lean: vec![(0.0, 0.0), (1.0, 0.0), (3.0, 0.35), (4.5, 0.35), (6.5, 0.0), (8.0, -0.15), (9.5, 0.0), (15.0, 0.0)],
        height: vec![(0.0, 0.92), (9.5, 0.92), (11.5, 0.82), (13.0, 0.82), (14.5, 0.92)],
        foot_offset: 0.0,
        ..walk(0.0)
    };
    vec![
        stand,
        stepping_behavior("walk-forward", Category::CyclicModerate, &walk(0.1), duration, true),
        stepping_behavior("walk-backward", Category::CyclicModerate, &walk(-0.1), duration, true),
        stepping_behavior("walk-random-turns", Category::CyclicModerate, &turns, duration, false),
        stepping_behavior("run-forward", Category::CyclicFast, &run, duration, true),
        stepping_behavior("run-left", Category::CyclicFast, &gallop, duration, true),
        stepping_behavior("arm-gesture-stand", Category::NonCyclic, &sway, duration, false),
        stepping_behavior("side-step", Category::CyclicModerate, &march, duration, true),
    ]
}
