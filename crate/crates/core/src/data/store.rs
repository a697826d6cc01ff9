//! A whole experiment's splits on disk, with a manifest of counts and fingerprints.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/source_train/  target_train/ (+ sidecar)  source_test/  target_test/  [unseen_test/]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{dataset_fingerprint, AccessAudit, ExperimentData};
use super::io::{load_dataset, load_sidecar, save_dataset, save_dataset_with_sidecar};
use super::scene::{SceneSpec, ShiftKind};
use super::types::DomainTag;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_NAMES: [&str; 5] = ["source_train", "target_train", "source_test", "target_test", "unseen_test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub count: usize,
    pub domain: DomainTag,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scene: SceneSpec,
    pub unseen_shift: Option<(ShiftKind, f64)>,
    pub splits: BTreeMap<String, SplitEntry>,
}

pub fn save_experiment(data: &ExperimentData, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    save_dataset(&data.source_train, &dir.join("source_train"))?;
    save_dataset_with_sidecar(&data.target_train, &data.target_sidecar, &dir.join("target_train"))?;
    save_dataset(&data.source_test, &dir.join("source_test"))?;
    save_dataset(&data.target_test, &dir.join("target_test"))?;
    if let Some(u) = &data.unseen_test {
        save_dataset(u, &dir.join("unseen_test"))?;
    }
    let mut splits = BTreeMap::new();
    let mut add = |name: &str, ds: &super::types::Dataset| {
        splits.insert(name.to_string(), SplitEntry { count: ds.len(), domain: ds.domain, fingerprint: dataset_fingerprint(ds) });
    };
    add("source_train", &data.source_train);
    add("target_train", &data.target_train);
    add("source_test", &data.source_test);
    add("target_test", &data.target_test);
    if let Some(u) = &data.unseen_test {
        add("unseen_test", u);
    }
    let manifest = Manifest { scene: data.spec.clone(), unseen_shift: data.unseen_shift, splits };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every split and checks it against the manifest fingerprints.
pub fn load_experiment(dir: &Path) -> Result<ExperimentData> {
    let manifest = load_manifest(dir)?;
    let load = |name: &str| -> Result<super::types::Dataset> {
        let ds = load_dataset(&dir.join(name))?;
        let entry = manifest.splits.get(name).ok_or_else(|| Error::UnknownSplit(name.to_string()))?;
        let found = dataset_fingerprint(&ds);
        if found != entry.fingerprint || ds.len() != entry.count {
            return Err(Error::FingerprintMismatch { expected: entry.fingerprint.clone(), found });
        }
        Ok(ds)
    };
    let unseen_test = if manifest.splits.contains_key("unseen_test") { Some(load("unseen_test")?) } else { None };
    Ok(ExperimentData {
        spec: manifest.scene.clone(),
        source_train: load("source_train")?,
        target_train: load("target_train")?,
        target_sidecar: load_sidecar(&dir.join("target_train"))?,
        source_test: load("source_test")?,
        target_test: load("target_test")?,
        unseen_test,
        unseen_shift: manifest.unseen_shift,
        audit: AccessAudit::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_experiment;

    #[test]
    fn experiment_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SceneSpec { image_size: 32, object_scale: (8.0, 16.0), ..Default::default() };
        let data = build_experiment(&spec, 4, 3, 2, Some((ShiftKind::Palette, 0.5))).unwrap();
        let m = save_experiment(&data, tmp.path()).unwrap();
        assert_eq!(m.splits["target_train"].count, 3);
        assert_eq!(m.splits.len(), 5);
        let back = load_experiment(tmp.path()).unwrap();
        assert_eq!(back.source_train, data.source_train);
        assert_eq!(back.target_train, data.target_train);
        assert_eq!(back.target_sidecar.labels, data.target_sidecar.labels);
        assert_eq!(back.unseen_test, data.unseen_test);
        assert_eq!(back.spec, data.spec);
    }

    #[test]
    fn tampered_split_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SceneSpec { image_size: 32, object_scale: (8.0, 16.0), ..Default::default() };
        let data = build_experiment(&spec, 2, 2, 2, None).unwrap();
        save_experiment(&data, tmp.path()).unwrap();
        let mut m = load_manifest(tmp.path()).unwrap();
        m.splits.get_mut("source_test").unwrap().fingerprint = "00".into();
        fs::write(tmp.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_experiment(tmp.path()), Err(Error::FingerprintMismatch { .. })));
    }
}
