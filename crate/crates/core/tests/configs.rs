use std::fs;
use std::path::Path;

use deltacomb::config::{load_config, validate, Experiment};

#[test]
fn shipped_configs_load_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let stem = path.file_stem().unwrap().to_str().unwrap().to_owned();
        let exp: Experiment = serde_json::from_value(serde_json::Value::String(stem.clone())).unwrap();
        let cfg = load_config(&path, Some(exp)).unwrap_or_else(|e| panic!("{stem}: {e}"));
        assert_eq!(cfg.experiment, exp);
        validate(&cfg).unwrap();
        seen += 1;
    }
    assert_eq!(seen, 8);
}

#[test]
fn experiment_mismatch_is_rejected() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/jl-check.toml");
    assert!(load_config(&path, Some(Experiment::PruferTrace)).is_err());
}
