use std::collections::VecDeque;
use std::sync::Mutex;

use hmg_core::dataset::{Dataset, Split};
use hmg_core::experts::{build_dataset, library, BehaviorSpec, Category, DEFAULT_NOISE};
use hmg_core::gptcore::{Discretizer, HeadKind, InputNorm, ModelCheckpoint, ModelConfig, Phase, Provenance};
use hmg_core::physim::{observe, BodyModel};
use hmg_core::rollout::{
    batch_evaluate, batch_generate, motion_completion, write_table, ActionPolicy, CheckpointPolicy, CompletionOptions,
    ExpertPolicy, MotionPrompt, PolicyInput, RolloutError, ZeroPolicy, GENERATION_CAP, PROMPT_STEPS,
};
use proptest::prelude::*;

fn dataset(dir: &std::path::Path, noise: f64) -> Dataset {
    build_dataset(dir, "roll", &library(), 1, noise, 11, &BodyModel::biped()).unwrap()
}

fn random_policy_model(seed: u64, range: f64) -> ModelCheckpoint {
    let config = ModelConfig {
        context: 32,
        embed: 16,
        layers: 1,
        heads: 2,
        bins: 16,
        input_dim: 30,
        output_dim: 6,
        head: HeadKind::Action,
        dropout: 0.0,
    };
    let mut c = ModelCheckpoint::init(
        config,
        InputNorm::identity(30),
        Discretizer::new(vec![-range; 6], vec![range; 6], 16).unwrap(),
        Provenance {
            dataset: "none".into(),
            steps: 0,
            phase: Phase::Scratch,
        },
        seed,
    )
    .unwrap();
    c.weights.head_w.iter_mut().for_each(|w| *w *= 50.0);
    c
}

#[test]
fn expert_adapter_reaches_the_cap_from_clean_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 0.0);
    let m = BodyModel::biped();
    let lib = library();
    for split in [Split::Train, Split::Validation] {
        for row in batch_evaluate(&ExpertPolicy, &ds, split, &m, &lib, CompletionOptions::for_model(&m)).unwrap() {
            assert_eq!(row.generation_steps, GENERATION_CAP, "{}", row.behavior);
            assert!(!row.terminated_by_fall);
            assert_eq!(row.episode_length, 14.0);
            assert_eq!(row.total_length, 15.0);
        }
    }
}

#[test]
fn zero_targets_collapse_every_locomotion_behavior() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), DEFAULT_NOISE);
    let m = BodyModel::biped();
    let lib = library();
    let moving: Vec<&BehaviorSpec> = lib.iter().filter(|b| b.category != Category::NonCyclic).collect();
    let rows = batch_evaluate(&ZeroPolicy, &ds, Split::Validation, &m, &lib, CompletionOptions::for_model(&m)).unwrap();
    for b in moving {
        for r in rows.iter().filter(|r| r.behavior == b.name) {
            assert!(r.terminated_by_fall && r.generation_steps < GENERATION_CAP, "{}", r.behavior);
        }
    }
}

#[test]
fn prompts_must_be_one_second() {
    let m = BodyModel::biped();
    let walk = &library()[1];
    let short = vec![m.standing_pose(); PROMPT_STEPS - 1];
    assert!(matches!(
        MotionPrompt::replay(walk, "x", &short, &m),
        Err(RolloutError::PromptLength { expected: 32, got: 31 })
    ));
    let mut p = MotionPrompt::replay(walk, "x", &vec![m.standing_pose(); PROMPT_STEPS], &m).unwrap();
    p.observations.pop();
    assert!(matches!(
        motion_completion(&ZeroPolicy, &p, &m, walk, CompletionOptions::for_model(&m)),
        Err(RolloutError::PromptLength { .. })
    ));
}

#[test]
fn observation_models_cannot_drive() {
    let mut c = random_policy_model(0, 1.0);
    c.config.head = HeadKind::Observation;
    assert!(matches!(CheckpointPolicy::new(&c, "obs"), Err(RolloutError::NotAnActionModel(_))));
}

#[test]
fn prompt_replay_tracks_the_stored_episode() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), DEFAULT_NOISE);
    let m = BodyModel::biped();
    for e in &ds.manifest().episodes {
        let p = MotionPrompt::from_dataset(&ds, &e.id, &m, &library()).unwrap();
        let f = ds.load_frames(&e.id).unwrap();
        assert_eq!(p.observations.len(), PROMPT_STEPS);
        let pose = 0..m.num_joints();
        for (t, obs) in p.observations.iter().enumerate() {
            for j in pose.clone() {
                let d = (obs[j] - f64::from(f.obs_row(t)[j])).abs();
                assert!(d < 1e-3, "{} step {t} joint {j}: {d}", e.id);
            }
        }
    }
}

/// Records every window it is shown and plays the expert.
struct Recorder(Mutex<Vec<Vec<Vec<f64>>>>);

impl ActionPolicy for Recorder {
    fn id(&self) -> String {
        "recorder".into()
    }

    fn act(&self, input: &PolicyInput) -> Result<Vec<f64>, RolloutError> {
        self.0.lock().unwrap().push(input.window.to_vec());
        ExpertPolicy.act(input)
    }
}

#[test]
fn simulator_is_the_only_source_of_observations_and_windows_slide() {
    let m = BodyModel::biped();
    let lib = library();
    let walk = &lib[1];
    let p = MotionPrompt::replay(walk, "w", &vec![walk.targets(0.0).unwrap(); PROMPT_STEPS], &m).unwrap();
    let rec = Recorder(Mutex::new(Vec::new()));
    let opts = CompletionOptions { cap: 60, ..CompletionOptions::for_model(&m) };
    let ep = motion_completion(&rec, &p, &m, walk, opts).unwrap();
    assert_eq!(ep.episode_length, 60);
    for (t, s) in ep.states.iter().enumerate() {
        assert_eq!(ep.generated_observations()[t], observe(s, &m));
    }

    let mut ring: VecDeque<Vec<f64>> = VecDeque::with_capacity(PROMPT_STEPS);
    let seen = rec.0.into_inner().unwrap();
    for (k, obs) in ep.observations.iter().enumerate() {
        if ring.len() == PROMPT_STEPS {
            ring.pop_front();
        }
        ring.push_back(obs.clone());
        if k >= PROMPT_STEPS {
            assert_eq!(seen[k - PROMPT_STEPS], ring.iter().cloned().collect::<Vec<_>>());
        }
    }
}

#[test]
fn evaluation_tables_are_sized_bounded_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), DEFAULT_NOISE);
    let m = BodyModel::biped();
    let lib = library();
    let c = random_policy_model(3, 0.6);
    let policy = CheckpointPolicy::new(&c, "random").unwrap();
    let opts = CompletionOptions::for_model(&m);
    let a = batch_evaluate(&policy, &ds, Split::Validation, &m, &lib, opts).unwrap();
    let b = batch_evaluate(&policy, &ds, Split::Validation, &m, &lib, opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), ds.manifest().split(Split::Validation).count());
    assert!(a.iter().all(|r| (0.0..=14.0).contains(&r.episode_length)));
    let mut out = Vec::new();
    write_table(&a, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "behavior,episode_id,policy,generation_steps,episode_length,total_length,terminated_by_fall"
    );
    assert_eq!(text.lines().count(), a.len() + 1);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn higher_fall_bar_never_lengthens_episodes(seed in 0u64..1000, range in 0.2f64..1.2) {
        let m = BodyModel::biped();
        let lib = library();
        let walk = &lib[1];
        let p = MotionPrompt::replay(walk, "w", &vec![walk.targets(0.0).unwrap(); PROMPT_STEPS], &m).unwrap();
        let c = random_policy_model(seed, range);
        let policy = CheckpointPolicy::new(&c, "random").unwrap();
        let mut last = usize::MAX;
        for fall in [0.3, 0.5, 0.6, 0.8, 0.95] {
            let opts = CompletionOptions { fall_fraction: fall, cap: 120 };
            let ep = motion_completion(&policy, &p, &m, walk, opts).unwrap();
            prop_assert!(ep.episode_length <= last);
            last = ep.episode_length;
        }
    }
}

#[test]
fn generated_episodes_keep_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), DEFAULT_NOISE);
    let m = BodyModel::biped();
    let opts = CompletionOptions { cap: 8, ..CompletionOptions::for_model(&m) };
    let eps = batch_generate(&ZeroPolicy, &ds, Split::Train, &m, &library(), opts).unwrap();
    let ids: Vec<&str> = ds.manifest().split(Split::Train).map(|e| e.id.as_str()).collect();
    assert_eq!(eps.iter().map(|e| e.episode_id.as_str()).collect::<Vec<_>>(), ids);
}
