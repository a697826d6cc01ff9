//! Named-array archive used for checkpoints.
//!
//! Layout: magic `ATCK`, little-endian `u32` header length, a JSON header holding metadata and
//! the array table, then every array's values as little-endian `f64` in table order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ATCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    metadata: serde_json::Value,
    arrays: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub fingerprint: String,
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Archive {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self { fingerprint: fingerprint.into(), metadata: serde_json::Value::Null, arrays: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.arrays.insert(name.into(), (shape, data));
    }

    /// Stores every tensor of `params` as `prefix/tensor-name`.
    pub fn insert_params<P: ParamSet + ?Sized>(&mut self, prefix: &str, params: &P) {
        for t in params.tensors() {
            self.insert(format!("{prefix}/{}", t.name), t.shape.clone(), t.data.to_vec());
        }
    }

    /// Restores every tensor of `params` from `prefix/tensor-name`, checking shapes.
    pub fn restore_params<P: ParamSet + ?Sized>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let sig = params.signature();
        for ((name, shape), dst) in sig.into_iter().zip(params.tensors_mut()) {
            let key = format!("{prefix}/{name}");
            let (s, data) = self.arrays.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            if *s != shape {
                return Err(Error::Checkpoint(format!("array {key} has shape {s:?}, expected {shape:?}")));
            }
            dst.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.arrays.get(name).map(|(_, d)| d.as_slice()).ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            fingerprint: self.fingerprint.clone(),
            metadata: self.metadata.clone(),
            arrays: self.arrays.iter().map(|(n, (s, _))| Entry { name: n.clone(), shape: s.clone() }).collect(),
        };
        let head = serde_json::to_vec(&header)?;
        let total: usize = self.arrays.values().map(|(_, d)| d.len()).sum();
        let mut out = Vec::with_capacity(8 + head.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(&head);
        for (_, d) in self.arrays.values() {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let head = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(head)?;
        let mut pos = 8 + hlen;
        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated array data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            pos += 8 * n;
            arrays.insert(e.name, (e.shape, data));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after array data"));
        }
        Ok(Self { fingerprint: header.fingerprint, metadata: header.metadata, arrays })
    }

    /// Writes to a temporary sibling and renames it into place. Creates missing parents.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and verifies the architecture fingerprint.
    pub fn load_checked(path: &Path, expected_fingerprint: &str) -> Result<Self> {
        let a = Self::load(path)?;
        if a.fingerprint != expected_fingerprint {
            return Err(Error::FingerprintMismatch { expected: expected_fingerprint.to_string(), found: a.fingerprint });
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::arch::{ArchConfig, DetectorParams};

    #[test]
    fn params_round_trip_through_file() {
        let arch = ArchConfig::micro();
        let p = DetectorParams::init(&arch, 9).unwrap();
        let mut a = Archive::new(arch.fingerprint());
        a.metadata = serde_json::json!({ "iteration": 12 });
        a.insert_params("student", &p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        a.save(&path).unwrap();
        let b = Archive::load_checked(&path, &arch.fingerprint()).unwrap();
        assert_eq!(a, b);
        let mut q = DetectorParams::zeros(&arch);
        b.restore_params("student", &mut q).unwrap();
        assert_eq!(p, q);
        assert!(!dir.path().join("ck.tmp").exists());
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        Archive::new("abc").save(&path).unwrap();
        assert!(matches!(Archive::load_checked(&path, "xyz"), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let p = DetectorParams::init(&ArchConfig::micro(), 0).unwrap();
        let mut a = Archive::new("f");
        a.insert_params("x", &p);
        let bytes = a.to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut q = DetectorParams::zeros(&ArchConfig::default());
        assert!(a.restore_params("x", &mut q).is_err());
    }
}
