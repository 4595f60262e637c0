use std::fs;
use std::path::PathBuf;

use shelab::experiments::{self, ExperimentParams, KINDS};
use shelab::ExperimentSpec;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_cover_every_kind_and_parse() {
    let mut kinds: Vec<&str> = Vec::new();
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let spec = ExperimentSpec::from_file(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            kinds.push(spec.params.kind());
        }
    }
    for kind in KINDS {
        assert!(kinds.contains(&kind), "no example config for {kind}");
    }
}

#[test]
fn outputs_do_not_depend_on_the_thread_count() {
    let text = r#"
id = "threads"
kind = "chung_diagnostic"
[params]
paths = 64
points = 60
"#;
    let spec = ExperimentSpec::from_toml(text).unwrap();
    let one = experiments::with_threads(Some(1), || experiments::execute(&spec, 11))
        .unwrap()
        .unwrap();
    let four = experiments::with_threads(Some(4), || experiments::execute(&spec, 11))
        .unwrap()
        .unwrap();
    assert_eq!(one.files.len(), four.files.len());
    for (a, b) in one.files.iter().zip(&four.files) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.bytes, b.bytes, "{} differs", a.name);
    }
    let other = experiments::execute(&spec, 12).unwrap();
    assert_ne!(one.files[0].bytes, other.files[0].bytes);
}

#[test]
fn manifest_round_trip_and_tamper_detection() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::from_file(&configs_dir().join("hz_gap.toml")).unwrap();
    assert!(matches!(spec.params, ExperimentParams::HzGap(_)));
    let out = experiments::run(&spec, 3, tmp.path()).unwrap();
    let manifest = out.dir.join("manifest.json");
    let m = experiments::read_manifest(&manifest).unwrap();
    assert_eq!(m.seed, 3);
    assert_eq!(m.experiment_id, "hz-gap");
    for f in &m.files {
        assert!(out.dir.join(&f.name).is_file());
    }
    let csv = fs::read_to_string(out.dir.join("hz_gap.csv")).unwrap();
    assert!(csv.starts_with("# target: "));
    assert!(experiments::rerun(&manifest, None).unwrap().identical());

    fs::write(out.dir.join("hz_gap.csv"), "tampered\n").unwrap();
    let mut edited = m.clone();
    edited.files[0].sha256 = "0".repeat(64);
    fs::write(&manifest, serde_json::to_vec_pretty(&edited).unwrap()).unwrap();
    let report = experiments::rerun(&manifest, Some(tmp.path())).unwrap();
    assert!(!report.identical());
    assert_eq!(report.mismatches.len(), 1);
}
