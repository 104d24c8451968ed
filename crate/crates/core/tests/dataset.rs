use std::collections::HashSet;
use std::fs;
use std::path::Path;

use hmg_core::dataset::{
    decode_episode, encode_episode, episode_id, fraction_count, make_fraction, normalization_stats, split_for, Dataset,
    DatasetError, DatasetManifest, DatasetWriter, Frames, Split, HEADER_LEN, STD_FLOOR,
};
use hmg_core::experts::{build_dataset, library, Episode, ExpertError};
use hmg_core::physim::BodyModel;

fn toy(behavior: &str, seed: u64, len: usize) -> Episode {
    let s = seed as f64;
    Episode {
        behavior: behavior.into(),
        seed,
        observations: (0..len).map(|t| vec![0.1 * t as f64 + s, (t as f64 * 0.37 + s).sin(), 7.0]).collect(),
        actions: (0..len).map(|t| vec![-0.013 * t as f64 * s, 1.0 / (1.0 + t as f64)]).collect(),
        states: Vec::new(),
        terminated_by_fall: len < 40,
    }
}

fn store(dir: &Path, episodes: &[(Episode, Split)]) -> Dataset {
    let mut w = DatasetWriter::create(dir, "toy", 9, 3, 2).unwrap();
    for (ep, split) in episodes {
        w.write_episode(ep, *split).unwrap();
    }
    w.finish().unwrap()
}

fn on_disk(dir: &Path) -> usize {
    fs::read_dir(dir.join("episodes"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "hmge"))
        .count()
}

#[test]
fn first_write_counts_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = DatasetWriter::create(dir.path(), "toy", 0, 3, 2).unwrap();
    assert_eq!(w.manifest().count("walk"), 0);
    w.write_episode(&toy("walk", 1, 50), Split::Train).unwrap();
    assert_eq!(w.manifest().count("walk"), 1);
    w.write_episode(&toy("walk", 2, 50), Split::Validation).unwrap();
    w.write_episode(&toy("stand", 2, 50), Split::Train).unwrap();
    assert_eq!(w.manifest().count("walk"), 2);
    assert_eq!(w.manifest().episodes.len(), on_disk(dir.path()));
    let reopened = Dataset::open(dir.path()).unwrap();
    assert_eq!(reopened.manifest(), w.manifest());
}

#[test]
fn wrong_width_and_duplicates_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = DatasetWriter::create(dir.path(), "toy", 0, 3, 2).unwrap();
    let mut wide = toy("walk", 1, 10);
    for o in &mut wide.observations {
        o.push(0.0);
    }
    assert!(matches!(
        w.write_episode(&wide, Split::Train),
        Err(DatasetError::DimensionMismatch { expected: 3, got: 4, .. })
    ));
    w.write_episode(&toy("walk", 1, 10), Split::Train).unwrap();
    assert!(matches!(
        w.write_episode(&toy("walk", 1, 10), Split::Train),
        Err(DatasetError::DuplicateEpisode(_))
    ));
    assert!(w.write_episode(&toy("bad/name", 1, 10), Split::Train).is_err());
    assert!(w.write_episode(&toy("walk", 5, 0), Split::Train).is_err());
    assert_eq!(w.manifest().episodes.len(), 1);
    assert_eq!(on_disk(dir.path()), 1);
}

#[test]
fn existing_dataset_is_not_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    drop(DatasetWriter::create(dir.path(), "toy", 0, 3, 2).unwrap());
    assert!(matches!(
        DatasetWriter::create(dir.path(), "toy", 0, 3, 2),
        Err(DatasetError::AlreadyExists(_))
    ));
}

#[test]
fn full_window_round_trips_at_storage_precision() {
    let dir = tempfile::tempdir().unwrap();
    let ep = toy("walk", 3, 64);
    let d = store(dir.path(), &[(ep.clone(), Split::Train)]);
    let id = episode_id("walk", 3);
    let (obs, act) = d.load_window(&id, 0, 64).unwrap();
    let narrow = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.iter().map(|&v| f64::from(v as f32)).collect()).collect()
    };
    assert_eq!(obs, narrow(&ep.observations));
    assert_eq!(act, narrow(&ep.actions));

    let (prompt, _) = d.load_window(&id, 0, 32).unwrap();
    assert_eq!(prompt.len(), 32);
    let (tail, _) = d.load_window(&id, 60, 4).unwrap();
    assert_eq!(tail[3], obs[63]);
    assert!(matches!(d.load_window(&id, 33, 32), Err(DatasetError::WindowOutOfRange { .. })));
    assert!(d.load_window(&id, usize::MAX, 2).is_err());
    assert!(matches!(d.load_window("nope", 0, 1), Err(DatasetError::UnknownEpisode(_))));
}

#[test]
fn codec_rejects_malformed_bytes() {
    let f = Frames::from_rows(&[vec![1.0, 2.0]], &[vec![3.0]]).unwrap();
    let bytes = encode_episode(&f);
    assert_eq!(bytes.len(), HEADER_LEN + 12);
    assert_eq!(&bytes[..4], b"HMGE");
    assert_eq!(decode_episode(&bytes).unwrap(), f);

    assert!(matches!(decode_episode(&bytes[..10]), Err(DatasetError::Truncated { .. })));
    assert!(matches!(decode_episode(&bytes[..bytes.len() - 1]), Err(DatasetError::Truncated { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_episode(&magic), Err(DatasetError::BadMagic)));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_episode(&version), Err(DatasetError::UnsupportedVersion(9))));
    let mut huge = bytes.clone();
    huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(decode_episode(&huge).is_err());
    let mut nan = bytes.clone();
    nan[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(decode_episode(&nan).is_err());
}

#[test]
fn fractions_round_half_up_and_nest() {
    assert_eq!(fraction_count(10, 0.5), 5);
    assert_eq!(fraction_count(10, 0.25), 3);
    assert_eq!(fraction_count(10, 1.0), 10);
    assert_eq!(fraction_count(3, 0.1), 1);
    assert_eq!(fraction_count(5, 0.3), 2);
    assert_eq!(fraction_count(0, 0.5), 0);

    let dir = tempfile::tempdir().unwrap();
    let mut eps = Vec::new();
    for b in ["walk", "run"] {
        for s in 0..10 {
            eps.push((toy(b, s, 8), Split::Train));
        }
    }
    eps.push((toy("walk", 99, 8), Split::Validation));
    let d = store(dir.path(), &eps);
    let m = d.manifest();

    let half = make_fraction(m, 0.5, 4).unwrap();
    let quarter = make_fraction(m, 0.25, 4).unwrap();
    let full = make_fraction(m, 1.0, 4).unwrap();
    for (sel, per) in [(&half, 5), (&quarter, 3), (&full, 10)] {
        for b in ["walk", "run"] {
            let n = sel.episodes.iter().filter(|id| m.entry(id).unwrap().behavior == b).count();
            assert_eq!(n, per);
        }
        assert!(sel.episodes.iter().all(|id| m.entry(id).unwrap().split == Split::Train));
    }
    let h: HashSet<_> = half.episodes.iter().collect();
    assert!(quarter.episodes.iter().all(|id| h.contains(id)));
    assert_eq!(make_fraction(m, 0.5, 4).unwrap(), half);
    assert_ne!(make_fraction(m, 0.5, 5).unwrap().episodes, half.episodes);
    for bad in [0.0, -0.5, 1.5, f64::NAN] {
        assert!(matches!(make_fraction(m, bad, 0), Err(DatasetError::InvalidFraction(_))));
    }
}

#[test]
fn stats_match_brute_force_and_ignore_validation() {
    let dir = tempfile::tempdir().unwrap();
    let a = toy("walk", 1, 5);
    let b = toy("walk", 2, 3);
    let held = toy("walk", 3, 4);
    let d = store(dir.path(), &[(a.clone(), Split::Train), (b.clone(), Split::Train), (held, Split::Validation)]);
    let stats = d.manifest().stats.clone().unwrap();
    assert_eq!(stats, normalization_stats(&d).unwrap());
    assert_eq!(stats.steps, 8);

    let rows: Vec<Vec<f64>> = a
        .observations
        .iter()
        .chain(&b.observations)
        .map(|r| r.iter().map(|&v| f64::from(v as f32)).collect())
        .collect();
    for j in 0..3 {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / 8.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!((stats.obs.mean[j] - mean).abs() < 1e-12);
        assert!((stats.obs.std[j] - var.sqrt().max(STD_FLOOR)).abs() < 1e-12);
        assert_eq!(stats.obs.min[j], col.iter().cloned().fold(f64::INFINITY, f64::min));
        assert_eq!(stats.obs.max[j], col.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    assert_eq!(stats.obs.std[2], STD_FLOOR);
}

#[test]
fn stats_do_not_depend_on_write_order() {
    let eps = [toy("walk", 1, 5), toy("run", 2, 7), toy("walk", 3, 6)];
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let fwd: Vec<_> = eps.iter().map(|e| (e.clone(), Split::Train)).collect();
    let rev: Vec<_> = eps.iter().rev().map(|e| (e.clone(), Split::Train)).collect();
    let s1 = store(d1.path(), &fwd).manifest().stats.clone().unwrap();
    let s2 = store(d2.path(), &rev).manifest().stats.clone().unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn empty_train_split_has_no_stats() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = DatasetWriter::create(dir.path(), "toy", 0, 3, 2).unwrap();
    w.write_episode(&toy("walk", 1, 5), Split::Validation).unwrap();
    assert!(matches!(w.finish(), Err(DatasetError::EmptyTrainSplit)));
}

#[test]
fn csv_export_lists_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = store(dir.path(), &[(toy("walk", 1, 6), Split::Train)]);
    let mut out = Vec::new();
    d.export_csv(&episode_id("walk", 1), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "step,obs_0,obs_1,obs_2,act_0,act_1");
    assert!(lines[1].starts_with("0,1,"));
}

#[test]
fn malformed_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = store(dir.path(), &[(toy("walk", 1, 6), Split::Train)]);
    let good = d.manifest().to_json();
    assert_eq!(&DatasetManifest::from_json_bytes(good.as_bytes()).unwrap(), d.manifest());
    let cases = [
        String::new(),
        "{}".into(),
        good.replace("\"episodes\": 1", "\"episodes\": 2"),
        good.replace("\"obs_dim\": 3", "\"obs_dim\": 0"),
        good.replace("\"format_version\": 1", "\"format_version\": 7"),
        good.replace("\"id\": \"toy\"", "\"id\": \"../x\""),
    ];
    for c in &cases {
        assert!(DatasetManifest::from_json_bytes(c.as_bytes()).is_err(), "{c}");
    }
}

#[test]
fn split_rule_holds_out_validation_behaviors_and_late_seeds() {
    assert!((0..10).all(|i| split_for("run-left", i, 10) == Split::Validation));
    let held: Vec<usize> = (0..10).filter(|&i| split_for("walk-forward", i, 10) == Split::Validation).collect();
    assert_eq!(held, vec![8, 9]);
    assert_eq!(split_for("walk-forward", 0, 1), Split::Train);
    let lib = library();
    let val = lib.iter().filter(|b| split_for(&b.name, 0, 10) == Split::Validation).count();
    assert_eq!(val, 2);
}

#[test]
fn build_counts_scale_with_rollouts_and_repeat_exactly() {
    let model = BodyModel::biped();
    let lib: Vec<_> = library().into_iter().filter(|b| b.name == "stand" || b.name == "run-left").collect();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let d3 = tempfile::tempdir().unwrap();
    let big = build_dataset(d1.path(), "large", &lib, 10, 0.05, 42, &model).unwrap();
    let again = build_dataset(d2.path(), "large", &lib, 10, 0.05, 42, &model).unwrap();
    let small = build_dataset(d3.path(), "small", &lib, 1, 0.05, 42, &model).unwrap();
    assert_eq!(big.manifest().episodes.len(), 20);
    assert_eq!(small.manifest().episodes.len() * 10, big.manifest().episodes.len());
    assert_eq!(on_disk(d1.path()), 20);
    assert_eq!(big.manifest(), again.manifest());
    for e in &big.manifest().episodes {
        assert_eq!(fs::read(big.episode_path(&e.id)).unwrap(), fs::read(again.episode_path(&e.id)).unwrap());
    }
    assert!(big.manifest().stats.is_some());
}

#[test]
fn build_rejects_duplicate_names_and_zero_rollouts() {
    let model = BodyModel::biped();
    let stand = library().into_iter().next().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = build_dataset(dir.path(), "d", &[stand.clone(), stand.clone()], 1, 0.0, 0, &model).unwrap_err();
    assert!(matches!(err, ExpertError::DuplicateBehavior(_)));
    let err = build_dataset(dir.path(), "d", &[stand], 0, 0.0, 0, &model).unwrap_err();
    assert!(matches!(err, ExpertError::NoRollouts));
}
