use std::path::{Path, PathBuf};

use forge_core::dataset::{
    load_dataset, load_dataset_with, load_traces, read_dataset, write_dataset, write_traces, DatasetError, LoadOptions,
};

mod common;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn error_corpus() {
    let cases = [
        ("bad_split", "unknown variant `medium`"),
        (
            "click_without_point",
            "step 1: gt_actions[0]: click action requires `point`",
        ),
        ("duplicate_episode", "duplicate episode id `ok`"),
        ("element_off_screen", "element `b` lies outside"),
        ("empty_gt", "gt_actions is empty"),
        ("gt_off_screen", "outside screen"),
        ("malformed_line", "line 2"),
        ("scroll_with_point", "does not take `point`"),
        ("step_order", "first step id is 1"),
        ("type_without_text", "requires `text`"),
        ("unknown_field", "unknown field `reviewer_notes`"),
        ("unknown_kind", "unknown variant `double_tap`"),
    ];
    let dir = fixtures().join("errors");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let name = entry
            .unwrap()
            .path()
            .file_stem()
            .unwrap()
            .to_string_lossy()
            .into_owned();
        assert!(cases.iter().any(|(c, _)| *c == name), "untested corpus file {name}");
        seen += 1;
    }
    assert_eq!(seen, cases.len());
    for (name, expect) in cases {
        let err = load_dataset(dir.join(format!("{name}.jsonl"))).unwrap_err().to_string();
        assert!(err.contains(expect), "{name}: `{err}` lacks `{expect}`");
    }
}

#[test]
fn lenient_mode_drops_unknown_fields() {
    let path = fixtures().join("errors/unknown_field.jsonl");
    let ds = load_dataset_with(path, LoadOptions { lenient: true }).unwrap();
    assert_eq!(ds.len(), 1);
}

#[test]
fn sample_fixture_round_trips() {
    let ds = load_dataset(fixtures().join("sample/dataset.jsonl")).unwrap();
    assert_eq!(ds.len(), 12);
    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf).unwrap();
    let again = read_dataset(&buf[..], LoadOptions::default()).unwrap();
    assert_eq!(again, ds);

    let traces = load_traces(fixtures().join("sample/traces.jsonl"), &ds).unwrap();
    let mut tbuf = Vec::new();
    write_traces(&traces, &mut tbuf).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tpath = dir.path().join("t.jsonl");
    std::fs::write(&tpath, &tbuf).unwrap();
    assert_eq!(load_traces(&tpath, &ds).unwrap(), traces);
}

#[test]
fn random_datasets_round_trip() {
    for seed in 0..50 {
        let w = common::world(seed, 6, 1);
        let mut buf = Vec::new();
        write_dataset(&w.dataset, &mut buf).unwrap();
        let again = read_dataset(&buf[..], LoadOptions::default()).unwrap();
        assert_eq!(again, w.dataset, "seed {seed}");
    }
}

#[test]
fn traces_for_unknown_steps_are_rejected() {
    let ds = load_dataset(fixtures().join("sample/dataset.jsonl")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    std::fs::write(
        &path,
        r#"{"agent_id":"x","episode_id":"e01","step_id":9,"action":{"kind":"wait"}}"#,
    )
    .unwrap();
    let err = load_traces(&path, &ds).unwrap_err();
    assert!(matches!(err, DatasetError::UnknownStep { .. }), "{err}");
}
