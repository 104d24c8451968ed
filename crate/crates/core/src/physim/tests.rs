use std::f64::consts::{FRAC_PI_2, PI};

use super::*;

fn pendulum(kp: f64, kd: f64, gravity: f64) -> BodyModel {
    let spec = BodySpec {
        links: vec![
            Link {
                name: "base".into(),
                mass: 1.0,
                length: 0.2,
                inertia: 0.01,
                com: None,
                contacts: vec![],
            },
            Link {
                name: "arm".into(),
                mass: 2.0,
                length: 0.5,
                inertia: 0.05,
                com: None,
                contacts: vec![],
            },
        ],
        joints: vec![Joint {
            name: "swing".into(),
            parent: 0,
            child: 1,
            anchor: Some([0.0, 0.0]),
            lower: -10.0,
            upper: 10.0,
            kp,
            kd,
            torque_limit: 1e6,
            armature: 0.0,
        }],
        root: 0,
        standing_height: 1.0,
        gravity,
        fall_fraction: 0.6,
        pinned_root: true,
        contact: ContactParams::default(),
        standing_pose: None,
    };
    BodyModel::new(spec).unwrap()
}

/// Moment of inertia of the pendulum arm about its pivot.
fn pivot_inertia() -> f64 {
    0.05 + 2.0 * 0.25 * 0.25
}

fn zero_gains(model: &BodyModel) -> BodyModel {
    let mut spec = model.spec().clone();
    for j in &mut spec.joints {
        j.kp = 0.0;
        j.kd = 0.0;
    }
    BodyModel::new(spec).unwrap()
}

#[test]
fn reset_standing_pose() {
    let m = BodyModel::biped();
    let s = reset(&m, &Pose::standing(&m)).unwrap();
    let obs = observe(&s, &m);
    let layout = ObservationLayout::for_model(&m);
    assert_eq!(obs[layout.range(Observable::BodyHeight)][0], m.standing_height());
    assert_eq!(&obs[layout.range(Observable::Velocimeter)], &[0.0, 0.0]);
    assert_eq!(obs[layout.range(Observable::Gyrometer)][0], 0.0);
    assert!(obs[layout.range(Observable::TouchSensors)].iter().all(|&f| f > 0.0));
    assert_eq!(s.time, 0.0);
}

#[test]
fn reset_accepts_boundary_and_rejects_outside() {
    let m = BodyModel::biped();
    let mut pose = Pose::standing(&m);
    pose.joints[1] = m.joints()[1].lower;
    let s = reset(&m, &pose).unwrap();
    assert_eq!(s.q[1], m.joints()[1].lower);

    let mut pose = Pose::standing(&m);
    pose.joints[0] = m.joints()[0].upper + 1e-9;
    match reset(&m, &pose) {
        Err(SimError::LimitViolation { joint, .. }) => assert_eq!(joint, "hip_l"),
        other => panic!("expected limit violation, got {other:?}"),
    }
}

#[test]
fn ballistic_drop_matches_free_fall() {
    let m = zero_gains(&BodyModel::biped());
    let mut pose = Pose::standing(&m);
    pose.root_pos[1] = 5.0;
    let mut s = reset(&m, &pose).unwrap();
    let z0 = s.root_pos[1];
    let action = m.standing_pose();
    for _ in 0..16 {
        s = step(&m, &s, &action).unwrap();
    }
    assert!((s.time - 0.5).abs() < 1e-15);
    let drop = z0 - s.root_pos[1];
    let expected: f64 = 0.5 * 9.81 * 0.25;
    assert!((expected - 1.22625).abs() < 1e-12);
    assert!((drop - expected).abs() / expected < 0.01, "drop {drop}");
}

#[test]
fn pinned_pendulum_holds_equilibrium() {
    let m = pendulum(50.0, 5.0, 9.81);
    // Hanging straight down from an upright base.
    let pose = Pose::at_rest([0.0, 2.0], 0.0, vec![PI]);
    let mut s = reset(&m, &pose).unwrap();
    for _ in 0..100 {
        s = step(&m, &s, &[PI]).unwrap();
    }
    assert!((s.q[0] - PI).abs() < 1e-9, "{}", s.q[0] - PI);
    assert_eq!(s.root_pos, [0.0, 2.0]);
}

#[test]
fn pd_step_response_follows_second_order_oracle() {
    let (kp, kd) = (40.0, 3.0);
    let m = pendulum(kp, kd, 0.0);
    let inertia = pivot_inertia();
    let target = 0.8;
    let mut s = reset(&m, &Pose::at_rest([0.0, 2.0], 0.0, vec![0.0])).unwrap();

    // I q'' + kd q' + kp q = kp target, q(0) = 0, q'(0) = 0.
    let wn = (kp / inertia).sqrt();
    let zeta = kd / (2.0 * (kp * inertia).sqrt());
    assert!(zeta < 1.0);
    let wd = wn * (1.0 - zeta * zeta).sqrt();
    let oracle = |t: f64| {
        target * (1.0 - (-zeta * wn * t).exp() * ((wd * t).cos() + zeta * wn / wd * (wd * t).sin()))
    };
    let mut max_dev: f64 = 0.0;
    for _ in 0..64 {
        s = step(&m, &s, &[target]).unwrap();
        max_dev = max_dev.max((s.q[0] - oracle(s.time)).abs());
    }
    assert!((s.time - 2.0).abs() < 1e-12);
    assert!(max_dev < 0.02, "trajectory deviates from oracle by {max_dev}");
    assert!((s.q[0] - target).abs() < 0.01, "final error {}", s.q[0] - target);
    assert!((oracle(2.0) - target).abs() < 0.01);
}

#[test]
fn passive_energy_drift_zero_gravity_tumbling() {
    let mut spec = zero_gains(&BodyModel::biped()).spec().clone();
    spec.gravity = 0.0;
    for j in &mut spec.joints {
        j.lower -= 20.0;
        j.upper += 20.0;
    }
    let m = BodyModel::new(spec).unwrap();
    let mut pose = Pose::standing(&m);
    pose.root_pos[1] = 10.0;
    pose.root_vel = [0.3, 0.1];
    pose.root_ang_vel = 1.5;
    pose.joints = vec![PI - 0.4, 0.6, -FRAC_PI_2, PI + 0.2, 0.3, -FRAC_PI_2 + 0.2];
    pose.joint_vel = Some(vec![1.0, -1.5, 2.0, -0.5, 1.0, -2.0]);
    let mut s = reset(&m, &pose).unwrap();
    let e0 = mechanical_energy(&m, &s);
    let mut worst: f64 = 0.0;
    for _ in 0..32 {
        s = step(&m, &s, &m.standing_pose()).unwrap();
        worst = worst.max((mechanical_energy(&m, &s) - e0).abs() / e0);
    }
    assert!(s.contact_forces.iter().all(|&f| f == 0.0));
    assert!(worst < 0.01, "relative drift {worst}");
}

#[test]
fn passive_energy_drift_gravity_pendulum() {
    let m = pendulum(0.0, 0.0, 9.81);
    let mut s = reset(&m, &Pose::at_rest([0.0, 2.0], 0.0, vec![PI - 1.0])).unwrap();
    // Reference the potential to the pendulum's lowest point so the ratio is meaningful.
    let floor = 2.0 * 9.81 * (2.0 - 0.25) + 1.0 * 9.81 * 2.1;
    let e0 = mechanical_energy(&m, &s) - floor;
    let mut worst: f64 = 0.0;
    for _ in 0..32 {
        s = step(&m, &s, &[0.0]).unwrap();
        worst = worst.max((mechanical_energy(&m, &s) - floor - e0).abs() / e0);
    }
    assert!(worst < 0.01, "relative drift {worst}");
}

#[test]
fn damped_pd_dissipates_energy() {
    let (kp, kd) = (30.0, 2.0);
    let m = pendulum(kp, kd, 0.0);
    let target = 0.0;
    let mut s = reset(&m, &Pose::at_rest([0.0, 2.0], 0.0, vec![1.0])).unwrap();
    let total = |s: &SimState| mechanical_energy(&m, s) + 0.5 * kp * (s.q[0] - target).powi(2);
    let mut prev = total(&s);
    for _ in 0..96 {
        s = step(&m, &s, &[target]).unwrap();
        let e = total(&s);
        assert!(e <= prev + 1e-6, "energy rose from {prev} to {e}");
        prev = e;
    }
}

#[test]
fn step_is_bit_deterministic() {
    let m = BodyModel::biped();
    let s0 = reset(&m, &Pose::standing(&m)).unwrap();
    let mut action = m.standing_pose();
    action[0] -= 0.3;
    action[4] += 0.5;
    let a = (0..40).try_fold(s0.clone(), |s, _| step(&m, &s, &action)).unwrap();
    let b = (0..40).try_fold(s0, |s, _| step(&m, &s, &action)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn step_rejects_non_finite_input() {
    let m = BodyModel::biped();
    let s = reset(&m, &Pose::standing(&m)).unwrap();
    let mut action = m.standing_pose();
    action[2] = f64::NAN;
    assert_eq!(
        step(&m, &s, &action),
        Err(SimError::NonFinite { field: "action[2]".into() })
    );
    let mut bad = s.clone();
    bad.qd[4] = f64::INFINITY;
    assert_eq!(
        step(&m, &bad, &m.standing_pose()),
        Err(SimError::NonFinite { field: "qd[4]".into() })
    );
}

#[test]
fn standing_holds_and_touch_matches_weight() {
    let m = BodyModel::biped();
    let mut s = reset(&m, &Pose::standing(&m)).unwrap();
    for _ in 0..64 {
        s = step(&m, &s, &m.standing_pose()).unwrap();
    }
    assert!(!is_fallen(&s, &m));
    let obs = observe(&s, &m);
    let layout = ObservationLayout::for_model(&m);
    let touch: f64 = obs[layout.range(Observable::TouchSensors)].iter().sum();
    let weight = m.total_mass() * m.gravity();
    assert!((touch - weight).abs() / weight < 0.02, "touch {touch} weight {weight}");
    assert_eq!(touch, s.contact_forces.iter().sum::<f64>());
}

#[test]
fn airborne_has_no_touch() {
    let m = BodyModel::biped();
    let mut pose = Pose::standing(&m);
    pose.root_pos[1] = 3.0;
    let s = step(&m, &reset(&m, &pose).unwrap(), &m.standing_pose()).unwrap();
    let obs = observe(&s, &m);
    let layout = ObservationLayout::for_model(&m);
    assert!(obs[layout.range(Observable::TouchSensors)].iter().all(|&f| f == 0.0));
}

#[test]
fn world_z_axis_follows_root_rotation() {
    let m = BodyModel::biped();
    let layout = ObservationLayout::for_model(&m);
    for &theta in &[0.0, 0.3, -1.1, 2.5] {
        let mut pose = Pose::standing(&m);
        pose.root_pos[1] = 3.0;
        pose.root_angle = theta;
        let s = reset(&m, &pose).unwrap();
        let obs = observe(&s, &m);
        let z = &obs[layout.range(Observable::WorldZAxis)];
        // Rotate world up (0, 1) into the root frame whose columns are the
        // torso normal and axis.
        let r = [[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
        let expected = [r[0][1], r[1][1]];
        assert!((z[0] - expected[0]).abs() < 1e-12 && (z[1] - expected[1]).abs() < 1e-12);
        assert!(((z[0] * z[0] + z[1] * z[1]).sqrt() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn observation_dimension_is_sum_of_categories() {
    let m = BodyModel::biped();
    let layout = ObservationLayout::for_model(&m);
    assert_eq!(layout.dim(), 6 + 2 + 1 + 4 + 2 + 6 + 2 + 6 + 1);
    assert_eq!(layout.column_names().len(), layout.dim());
    let mut s = reset(&m, &Pose::standing(&m)).unwrap();
    for _ in 0..5 {
        assert_eq!(observe(&s, &m).len(), layout.dim());
        s = step(&m, &s, &[0.0; 6]).unwrap();
    }
}

#[test]
fn fall_threshold_is_strict() {
    let m = BodyModel::biped();
    let standing = reset(&m, &Pose::standing(&m)).unwrap();
    assert!(!is_fallen(&standing, &m));
    let mut ground = standing.clone();
    ground.root_pos[1] = 0.0;
    assert!(is_fallen(&ground, &m));
    let mut edge = standing;
    edge.root_pos[1] = m.fall_fraction() * m.standing_height();
    assert!(!is_fallen(&edge, &m));
    edge.root_pos[1] = f64::from_bits(edge.root_pos[1].to_bits() - 1);
    assert!(is_fallen(&edge, &m));
}

#[test]
fn zero_targets_collapse_the_biped() {
    let m = BodyModel::biped();
    let mut s = reset(&m, &Pose::standing(&m)).unwrap();
    let mut fell = false;
    for _ in 0..160 {
        s = step(&m, &s, &[0.0; 6]).unwrap();
        if is_fallen(&s, &m) {
            fell = true;
            break;
        }
    }
    assert!(fell);
}

#[test]
fn render_single_and_ghosted_frames() {
    let m = BodyModel::biped();
    let s = reset(&m, &Pose::standing(&m)).unwrap();
    let svg = render_svg(std::slice::from_ref(&s), &m, None).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<circle").count(), 1);
    // Torso drawn vertical: its line has equal x endpoints.
    let torso = svg.lines().find(|l| l.starts_with("  <line x1")).unwrap();
    let attr = |name: &str| -> f64 {
        let start = torso.find(&format!("{name}=\"")).unwrap() + name.len() + 2;
        torso[start..].split('"').next().unwrap().parse().unwrap()
    };
    assert_eq!(attr("x1"), attr("x2"));

    let mut fall = vec![s.clone()];
    let mut cur = s.clone();
    for _ in 0..4 {
        for _ in 0..10 {
            cur = step(&m, &cur, &[0.0; 6]).unwrap();
        }
        fall.push(cur.clone());
    }
    let svg = render_svg(&fall, &m, None).unwrap();
    assert_eq!(svg.matches("<circle").count(), 5);
    assert!(is_fallen(fall.last().unwrap(), &m));

    let ghosted = render_svg(&fall, &m, Some(&vec![s; 5])).unwrap();
    assert_eq!(ghosted.matches("opacity=\"0.35\"").count(), 5);
    assert_eq!(ghosted.matches("opacity=\"1\"").count(), 5);
    assert_eq!(render_svg(&[], &m, None), Err(SimError::EmptySequence));
}
