use hmg_core::experts::{
    episode_seed, expert_action, generate_rollout, library, BehaviorSpec, Category, ExpertError, MAX_EPISODE_STEPS,
};
use hmg_core::physim::{observe, reset, step, BodyModel, CONTROL_PERIOD};

fn behavior(name: &str) -> BehaviorSpec {
    library().into_iter().find(|b| b.name == name).expect("shipped behavior")
}

#[test]
fn library_covers_every_category() {
    let lib = library();
    assert!(lib.len() >= 8);
    for cat in [Category::CyclicModerate, Category::CyclicFast, Category::NonCyclic] {
        assert!(lib.iter().any(|b| b.category == cat), "{cat:?} missing");
    }
    let model = BodyModel::biped();
    for b in &lib {
        b.validate(&model).unwrap();
    }
}

#[test]
fn stand_targets_are_constant() {
    let stand = behavior("stand");
    let model = BodyModel::biped();
    let first = stand.targets(0.0).unwrap();
    assert_eq!(first, model.standing_pose());
    for k in 0..=60 {
        assert_eq!(stand.targets(k as f64 * 0.25).unwrap(), first);
    }
    let s = reset(&model, &stand.initial_pose(&model).unwrap()).unwrap();
    let a = expert_action(&model, &s, &stand, 0.0).unwrap();
    for t in [1.0, 7.3, 15.0] {
        assert_eq!(expert_action(&model, &s, &stand, t).unwrap(), a);
    }
}

#[test]
fn walk_repeats_after_one_period() {
    let walk = behavior("walk-forward");
    let period = walk.period.expect("walk is cyclic");
    let model = BodyModel::biped();
    let s = reset(&model, &walk.initial_pose(&model).unwrap()).unwrap();
    for k in 0..40 {
        let t = k as f64 * 0.17;
        let a = expert_action(&model, &s, &walk, t).unwrap();
        let b = expert_action(&model, &s, &walk, t + period).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "t={t}: {x} vs {y}");
        }
    }
}

#[test]
fn time_past_duration_is_rejected() {
    let walk = behavior("walk-forward");
    let model = BodyModel::biped();
    let s = reset(&model, &walk.initial_pose(&model).unwrap()).unwrap();
    let err = expert_action(&model, &s, &walk, walk.duration + 1e-9).unwrap_err();
    assert!(matches!(err, ExpertError::OutOfRange { .. }));
    assert!(expert_action(&model, &s, &walk, -1e-9).is_err());
    assert!(expert_action(&model, &s, &walk, walk.duration).is_ok());
}

#[test]
fn every_shipped_expert_reaches_the_cap_without_noise() {
    let model = BodyModel::biped();
    for b in library() {
        let ep = generate_rollout(&b, &model, 0.0, 0).unwrap();
        assert_eq!(ep.len(), MAX_EPISODE_STEPS, "{} fell", b.name);
        assert!(!ep.terminated_by_fall, "{}", b.name);
    }
}

#[test]
fn rollouts_are_deterministic() {
    let model = BodyModel::biped();
    let walk = behavior("walk-forward");
    let a = generate_rollout(&walk, &model, 0.05, 11).unwrap();
    let b = generate_rollout(&walk, &model, 0.05, 11).unwrap();
    assert_eq!(a, b);
    let c = generate_rollout(&walk, &model, 0.05, 12).unwrap();
    assert_ne!(a.actions, c.actions);
}

#[test]
fn noisy_actions_are_recorded_and_replay_exactly() {
    let model = BodyModel::biped();
    let walk = behavior("walk-forward");
    let clean = generate_rollout(&walk, &model, 0.0, 3).unwrap();
    let noisy = generate_rollout(&walk, &model, 0.05, 3).unwrap();
    assert_ne!(clean.actions[0], noisy.actions[0]);
    for ep in [&clean, &noisy] {
        assert_eq!(ep.observations.len(), ep.actions.len());
        assert_eq!(ep.states.len(), ep.actions.len());
        for (o, s) in ep.observations.iter().zip(&ep.states) {
            assert_eq!(*o, observe(s, &model));
        }
        let mut s = ep.states[0].clone();
        for (k, a) in ep.actions.iter().enumerate() {
            assert_eq!(s, ep.states[k], "replay diverged at step {k}");
            s = step(&model, &s, a).unwrap();
        }
    }
}

#[test]
fn noise_perturbs_without_toppling_most_walks() {
    let model = BodyModel::biped();
    let walk = behavior("walk-forward");
    let lengths: Vec<usize> = (0..4)
        .map(|i| generate_rollout(&walk, &model, 0.05, episode_seed(5, &walk.name, i)).unwrap().len())
        .collect();
    let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    assert!(mean > 0.5 * MAX_EPISODE_STEPS as f64, "{lengths:?}");
}

#[test]
fn immediate_fall_still_yields_one_row() {
    let mut spec = BodyModel::biped().spec().clone();
    spec.gravity = 1e5;
    let model = BodyModel::new(spec).unwrap();
    let ep = generate_rollout(&behavior("stand"), &model, 0.0, 0).unwrap();
    assert_eq!(ep.len(), 1);
    assert!(ep.terminated_by_fall);
}

#[test]
fn negative_noise_is_rejected() {
    let model = BodyModel::biped();
    assert!(matches!(
        generate_rollout(&behavior("stand"), &model, -0.1, 0),
        Err(ExpertError::InvalidNoise(_))
    ));
}

#[test]
fn episode_seeds_are_stable_and_distinct() {
    assert_eq!(episode_seed(7, "walk-forward", 3), episode_seed(7, "walk-forward", 3));
    assert_ne!(episode_seed(7, "walk-forward", 3), episode_seed(7, "walk-forward", 4));
    assert_ne!(episode_seed(7, "walk-forward", 3), episode_seed(7, "walk-backward", 3));
    assert_ne!(episode_seed(7, "walk-forward", 3), episode_seed(8, "walk-forward", 3));
}

#[test]
fn behavior_json_round_trips() {
    for b in library() {
        let back = BehaviorSpec::from_json(&b.to_json()).unwrap();
        assert_eq!(back, b);
    }
}

#[test]
fn malformed_behavior_json_is_an_error() {
    let cases = [
        "",
        "{}",
        r#"{"name":"x","category":"non-cyclic","duration":1.0,"knots":[]}"#,
        r#"{"name":"x","category":"non-cyclic","duration":1.0,"knots":[{"t":0.5,"targets":[1.0]},{"t":0.2,"targets":[1.0]}]}"#,
        r#"{"name":"x","category":"non-cyclic","duration":-1.0,"knots":[{"t":0.0,"targets":[1.0]}]}"#,
        r#"{"name":"x","category":"cyclic-fast","duration":1.0,"period":0.5,"knots":[{"t":0.0,"targets":[1.0]},{"t":0.5,"targets":[1.0]}]}"#,
        r#"{"name":"x","category":"sideways","duration":1.0,"knots":[{"t":0.0,"targets":[1.0]}]}"#,
    ];
    for c in cases {
        assert!(BehaviorSpec::from_json(c).is_err(), "{c}");
    }
}

#[test]
fn wrong_width_fails_validation() {
    let b = BehaviorSpec::from_json(r#"{"name":"x","category":"non-cyclic","duration":1.0,"knots":[{"t":0.0,"targets":[1.0]}]}"#)
        .unwrap();
    assert!(b.validate(&BodyModel::biped()).is_err());
    assert!(generate_rollout(&b, &BodyModel::biped(), 0.0, 0).is_err());
}

#[test]
fn control_period_matches_episode_cap() {
    assert!((MAX_EPISODE_STEPS as f64 * CONTROL_PERIOD - 15.0).abs() < 1e-12);
}
