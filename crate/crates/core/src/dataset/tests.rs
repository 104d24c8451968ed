use super::*;

fn toy(behavior: &str, seed: u64, len: usize) -> Episode {
    Episode {
        behavior: behavior.into(),
        seed,
        observations: (0..len).map(|t| vec![t as f64, 0.5, -1.25]).collect(),
        actions: (0..len).map(|t| vec![0.1 * t as f64, 2.0]).collect(),
        states: Vec::new(),
        terminated_by_fall: false,
    }
}

#[test]
fn crash_before_rename_leaves_store_readable() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = DatasetWriter::create(dir.path(), "toy", 0, 3, 2).unwrap();
    let kept = w.write_episode(&toy("walk", 1, 4), Split::Train).unwrap();
    w.crash_before_rename = true;
    assert!(w.write_episode(&toy("walk", 2, 4), Split::Train).is_err());
    assert_eq!(w.manifest().count("walk"), 1);
    drop(w);

    let tmp = temp_path(&episode_path(dir.path(), &episode_id("walk", 2)));
    assert!(tmp.exists());
    let d = Dataset::open(dir.path()).unwrap();
    assert_eq!(d.manifest().episodes.len(), 1);
    assert!(d.manifest().entry(&episode_id("walk", 2)).is_err());
    d.load_frames(&kept).unwrap();

    let mut w = DatasetWriter::open(dir.path()).unwrap();
    assert!(!tmp.exists());
    w.write_episode(&toy("walk", 2, 4), Split::Train).unwrap();
    assert_eq!(w.manifest().count("walk"), 2);
}

#[test]
fn second_writer_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let _w = DatasetWriter::create(dir.path(), "toy", 0, 3, 2).unwrap();
    assert!(matches!(DatasetWriter::open(dir.path()), Err(DatasetError::Locked(_))));
    Dataset::open(dir.path()).unwrap();
}

#[test]
fn orphan_files_are_swept_on_open() {
    let dir = tempfile::tempdir().unwrap();
    drop(DatasetWriter::create(dir.path(), "toy", 0, 3, 2).unwrap());
    let stray = episode_path(dir.path(), "walk-stray");
    fs::write(&stray, b"junk").unwrap();
    let w = DatasetWriter::open(dir.path()).unwrap();
    assert!(!stray.exists());
    assert!(w.manifest().episodes.is_empty());
}
