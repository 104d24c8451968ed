use std::path::Path;

use hmg_core::dataset::{Dataset, DatasetWriter, Split};
use hmg_core::experts::{generate_rollout, library, Episode};
use hmg_core::gptcore::{Decode, HeadKind, LossKind, Mode, Trainable};
use hmg_core::physim::BodyModel;
use hmg_core::trainer::{
    finetune, pretrain, train_scratch, validate, Adam, Arch, Selection, Targets, TrainConfig, TrainError, TrainPhase,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_64: f64 = 4.158_883_083_359_672;

fn rollout(behavior: &str, seed: u64, len: usize) -> Episode {
    let spec = library().into_iter().find(|b| b.name == behavior).unwrap();
    let mut ep = generate_rollout(&spec, &BodyModel::biped(), 0.05, seed).unwrap();
    ep.observations.truncate(len);
    ep.actions.truncate(len);
    ep.states.truncate(len);
    ep
}

/// Two short walk episodes for training, one for validation.
fn two_episodes(dir: &Path) -> Dataset {
    let m = BodyModel::biped();
    let obs_dim = hmg_core::physim::ObservationLayout::for_model(&m).dim();
    let mut w = DatasetWriter::create(dir, "pair", 1, obs_dim, m.action_dim()).unwrap();
    w.write_episode(&rollout("walk-forward", 1, 40), Split::Train).unwrap();
    w.write_episode(&rollout("walk-forward", 2, 40), Split::Train).unwrap();
    w.write_episode(&rollout("walk-forward", 3, 20), Split::Validation).unwrap();
    w.finish().unwrap()
}

fn micro(phase: TrainPhase, steps: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        phase,
        steps,
        batch: 4,
        window: 16,
        lr,
        finetune_lr: (phase == TrainPhase::Finetune).then_some(lr),
        arch: Arch {
            context: 16,
            embed: 32,
            layers: 2,
            heads: 2,
            bins: 64,
            dropout: 0.0,
        },
        log_interval: 50,
        seed: 7,
        timed: false,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_overfits_two_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let (model, log) = pretrain(&ds, &micro(TrainPhase::Pretrain, 500, 3e-3)).unwrap();
    let ce = log.last().unwrap().ce_loss;
    assert!(ce <= 0.1 * LN_64, "final CE {ce}");
    assert_eq!(model.config.head, HeadKind::Observation);
    assert_eq!(model.provenance.steps, 500);
}

#[test]
fn finetuning_overfits_two_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let (source, _) = pretrain(&ds, &micro(TrainPhase::Pretrain, 100, 3e-3)).unwrap();
    let (model, log) = finetune(&source, &ds, None, &micro(TrainPhase::Finetune, 400, 3e-3)).unwrap();
    let ce = log.last().unwrap().ce_loss;
    assert!(ce <= 0.1 * LN_64, "final CE {ce}");
    assert_eq!(model.config.head, HeadKind::Action);
    assert_eq!(model.config.output_dim, 6);
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let mut cfg = micro(TrainPhase::Pretrain, 30, 1e-3);
    cfg.arch.dropout = 0.1;
    let a = pretrain(&ds, &cfg).unwrap();
    let b = pretrain(&ds, &cfg).unwrap();
    assert_eq!(a, b);
    let mut sc = micro(TrainPhase::Scratch, 30, 1e-3);
    sc.arch.dropout = 0.1;
    assert_eq!(train_scratch(&ds, None, &sc).unwrap(), train_scratch(&ds, None, &sc).unwrap());
    let ft = micro(TrainPhase::Finetune, 20, 1e-3);
    assert_eq!(finetune(&a.0, &ds, None, &ft).unwrap(), finetune(&a.0, &ds, None, &ft).unwrap());
    cfg.seed += 1;
    assert_ne!(pretrain(&ds, &cfg).unwrap().0.weights, a.0.weights);
}

#[test]
fn zero_budget_and_bad_rates_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let mut cfg = micro(TrainPhase::Pretrain, 0, 1e-3);
    assert!(matches!(pretrain(&ds, &cfg), Err(TrainError::Config(_))));
    cfg.steps = 5;
    cfg.lr = 0.0;
    assert!(matches!(pretrain(&ds, &cfg), Err(TrainError::Config(_))));
    cfg.lr = 1e-3;
    cfg.window = 17;
    assert!(matches!(pretrain(&ds, &cfg), Err(TrainError::Config(_))));
    let wrong_phase = micro(TrainPhase::Scratch, 5, 1e-3);
    assert!(matches!(pretrain(&ds, &wrong_phase), Err(TrainError::Config(_))));
}

#[test]
fn frozen_finetune_changes_only_the_head() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let (source, _) = pretrain(&ds, &micro(TrainPhase::Pretrain, 20, 1e-3)).unwrap();
    let mut cfg = micro(TrainPhase::Finetune, 100, 1e-3);
    cfg.frozen = true;
    let (tuned, _) = finetune(&source, &ds, None, &cfg).unwrap();
    let specs = tuned.config.tensor_specs();
    let (before, after) = (source.weights.tensors(), tuned.weights.tensors());
    for (i, s) in specs.iter().enumerate().filter(|(_, s)| s.backbone) {
        assert_eq!(before[i], after[i], "{} moved", s.name);
    }
    let swapped = source.swap_head(&ds.manifest().stats.as_ref().unwrap().act, 0).unwrap();
    assert_ne!(swapped.weights.head_w, tuned.weights.head_w);
}

#[test]
fn finetune_defaults_keep_budget_and_rate_ordering() {
    let pre = TrainConfig::for_phase(TrainPhase::Pretrain);
    let ft = TrainConfig::for_phase(TrainPhase::Finetune);
    assert_eq!(pre.steps, 20_000);
    assert_eq!(ft.steps * 5, pre.steps);
    assert!(ft.peak_lr() < pre.peak_lr());
    assert!((ft.peak_lr() - 3e-6).abs() < 1e-18);
    let explicit = TrainConfig {
        finetune_lr: Some(3e-7),
        ..ft.clone()
    };
    assert_eq!(explicit.peak_lr(), 3e-7);
    assert!(!ft.frozen);
}

#[test]
fn learning_rate_warms_up_then_decays() {
    let cfg = TrainConfig {
        steps: 200,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let warm = 10;
    for s in 0..warm {
        assert!((cfg.lr_at(s) - 1e-3 * (s + 1) as f64 / warm as f64).abs() < 1e-15);
    }
    for s in warm..200 {
        let p = (s - warm) as f64 / (200 - warm) as f64;
        let oracle = 1e-4 + 0.5 * 9e-4 * (1.0 + (std::f64::consts::PI * p).cos());
        assert!((cfg.lr_at(s) - oracle).abs() < 1e-15, "step {s}");
    }
    assert!((cfg.lr_at(warm) - 1e-3).abs() < 1e-15);
}

#[test]
fn finetune_needs_actions_and_a_pretrained_source() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let (source, _) = pretrain(&ds, &micro(TrainPhase::Pretrain, 5, 1e-3)).unwrap();
    let (tuned, _) = finetune(&source, &ds, None, &micro(TrainPhase::Finetune, 5, 1e-3)).unwrap();
    assert!(matches!(
        finetune(&tuned, &ds, None, &micro(TrainPhase::Finetune, 5, 1e-3)),
        Err(TrainError::Model(_))
    ));

    let obs_only = tempfile::tempdir().unwrap();
    let mut w = DatasetWriter::create(obs_only.path(), "obs", 1, 30, 0).unwrap();
    let mut ep = rollout("walk-forward", 1, 30);
    ep.actions.iter_mut().for_each(Vec::clear);
    w.write_episode(&ep, Split::Train).unwrap();
    let obs = w.finish().unwrap();
    assert!(matches!(
        finetune(&source, &obs, None, &micro(TrainPhase::Finetune, 5, 1e-3)),
        Err(TrainError::NoActions(_))
    ));
    assert!(matches!(
        train_scratch(&obs, None, &micro(TrainPhase::Scratch, 5, 1e-3)),
        Err(TrainError::NoActions(_))
    ));
}

#[test]
fn empty_train_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = DatasetWriter::create(dir.path(), "val", 1, 30, 6).unwrap();
    w.write_episode(&rollout("walk-forward", 1, 30), Split::Validation).unwrap();
    let ds = w.finish();
    match ds {
        Err(_) => {}
        Ok(ds) => assert!(pretrain(&ds, &micro(TrainPhase::Pretrain, 5, 1e-3)).is_err()),
    }
}

#[test]
fn constant_predictor_mse_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let (mut model, _) = train_scratch(&ds, None, &micro(TrainPhase::Scratch, 5, 1e-3)).unwrap();
    let k = 37;
    model.weights.head_w.iter_mut().for_each(|w| *w = 0.0);
    let bins = model.config.bins;
    for (i, b) in model.weights.head_b.iter_mut().enumerate() {
        *b = if i % bins == k { 10.0 } else { 0.0 };
    }
    let pairs = Selection::split(&ds, Split::Validation).load(Targets::Action).unwrap();
    let mse = validate(&model, &pairs, Decode::Argmax).unwrap();

    let frames = ds.load_frames(&ds.manifest().split(Split::Validation).next().unwrap().id).unwrap();
    let mut sum = 0.0;
    for t in 0..frames.len {
        for (d, &y) in frames.act_row(t).iter().enumerate() {
            sum += (f64::from(y) - model.discretizer.center(d, k)).powi(2);
        }
    }
    let oracle = sum / (frames.len * frames.act_dim) as f64;
    assert!((mse - oracle).abs() <= 1e-12 * oracle.max(1.0), "{mse} vs {oracle}");
    assert!(validate(&model, &pairs, Decode::Expectation).unwrap() > 0.0);
}

#[test]
fn exact_decoder_gives_zero_mse() {
    let dir = tempfile::tempdir().unwrap();
    let m = BodyModel::biped();
    let (mut model, _) = {
        let ds = two_episodes(dir.path());
        train_scratch(&ds, None, &micro(TrainPhase::Scratch, 2, 1e-3)).unwrap()
    };
    let k = 20;
    model.weights.head_w.iter_mut().for_each(|w| *w = 0.0);
    let bins = model.config.bins;
    for (i, b) in model.weights.head_b.iter_mut().enumerate() {
        *b = if i % bins == k { 10.0 } else { 0.0 };
    }
    let centers: Vec<f64> = (0..6).map(|d| f64::from(model.discretizer.center(d, k) as f32)).collect();
    for (d, c) in centers.iter().enumerate() {
        let shift = model.discretizer.center(d, k) - c;
        model.discretizer.lo[d] -= shift;
        model.discretizer.hi[d] -= shift;
    }
    let exact = tempfile::tempdir().unwrap();
    let mut w = DatasetWriter::create(exact.path(), "exact", 1, 30, m.action_dim()).unwrap();
    let mut ep = rollout("stand", 4, 45);
    for row in &mut ep.actions {
        row.copy_from_slice(&centers);
    }
    w.write_episode(&ep, Split::Validation).unwrap();
    w.write_episode(&rollout("stand", 5, 10), Split::Train).unwrap();
    let ds = w.finish().unwrap();
    let pairs = Selection::split(&ds, Split::Validation).load(Targets::Action).unwrap();
    let mse = validate(&model, &pairs, Decode::Argmax).unwrap();
    assert!(mse < 1e-28, "{mse}");
}

#[test]
fn validation_ignores_episode_order() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let (model, _) = train_scratch(&ds, None, &micro(TrainPhase::Scratch, 20, 1e-3)).unwrap();
    let ids: Vec<String> = ds.manifest().episodes.iter().map(|e| e.id.clone()).collect();
    let fwd = Selection::ids(&ds, ids.clone()).unwrap().load(Targets::Action).unwrap();
    let rev = Selection::ids(&ds, ids.into_iter().rev().collect()).unwrap().load(Targets::Action).unwrap();
    let (a, b) = (validate(&model, &fwd, Decode::Argmax).unwrap(), validate(&model, &rev, Decode::Argmax).unwrap());
    assert!((a - b).abs() <= 1e-12 * a, "{a} vs {b}");
}

#[test]
fn fixed_batch_loss_falls_over_first_steps() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let cfg = micro(TrainPhase::Scratch, 10, 1e-4);
    let (mut model, _) = train_scratch(&ds, None, &TrainConfig { steps: 1, ..cfg.clone() }).unwrap();
    model.weights = hmg_core::gptcore::Weights::init(&model.config, 3).unwrap();
    let pairs = Selection::split(&ds, Split::Train).load(Targets::Action).unwrap();
    let ep = &pairs.episodes()[0];
    let inputs = ep.inputs(0, 16).to_vec();
    let targets: Vec<usize> = (0..16)
        .flat_map(|t| {
            let row = ep.target_values(t).to_vec();
            let disc = model.discretizer.clone();
            row.into_iter().enumerate().map(move |(d, v)| disc.discretize(f64::from(v), d))
        })
        .collect();
    let mut adam = Adam::new(&model, Trainable::All);
    let mut losses = Vec::new();
    for t in 1..=11 {
        let tr = model.forward_batch(&inputs, 1, 16, Mode::Eval).unwrap();
        let (loss, g) = model.backward_batch(&tr, &targets, None, LossKind::CrossEntropy, Trainable::All).unwrap();
        losses.push(loss);
        adam.step(&mut model.weights, &g, 1e-4, t, &cfg);
    }
    let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 1, "{losses:?}");
}

#[test]
fn log_is_ordered_finite_and_serializes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let mut cfg = micro(TrainPhase::Pretrain, 120, 1e-3);
    cfg.val_interval = 50;
    let (_, log) = pretrain(&ds, &cfg).unwrap();
    let steps: Vec<u64> = log.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![50, 100, 120]);
    assert!(log.records.iter().all(|r| r.ce_loss.is_finite() && r.lr > 0.0 && r.seconds == 0.0));
    assert!(log.records.iter().all(|r| r.val_mse.is_some_and(f64::is_finite)));
    let mut out = Vec::new();
    log.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,ce_loss,val_mse,lr,seconds");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn fraction_training_uses_only_listed_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = two_episodes(dir.path());
    let f = hmg_core::dataset::make_fraction(ds.manifest(), 0.5, 3).unwrap();
    assert_eq!(f.episodes.len(), 1);
    let sel = Selection::fraction(&ds, &f).unwrap();
    assert_eq!(sel.load(Targets::Action).unwrap().episodes().len(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut other = f.clone();
    other.base = "elsewhere".into();
    assert!(Selection::fraction(&ds, &other).is_err());
    other = f.clone();
    other.episodes.push(format!("ghost-{}", rng.gen::<u32>()));
    assert!(Selection::fraction(&ds, &other).is_err());
    assert!(train_scratch(&ds, Some(&f), &micro(TrainPhase::Scratch, 5, 1e-3)).is_ok());
}
