//! Experiment directory layout and config snapshot handling.

use std::fs;
use std::path::{Path, PathBuf};

use atlab_core::experiment::ExperimentConfig;
use atlab_core::{Error, Result};

pub const SNAPSHOT: &str = "config.toml";

/// ```text
/// <root>/config.toml            immutable snapshot written before any training
/// <root>/datasets/              splits, sidecar and manifest
/// <root>/checkpoints/           pretrain.ckpt, adapt_NNNNNN.ckpt, adapt_final.ckpt, ablation/
/// <root>/metrics.log            one JSON record per adaptation iteration
/// <root>/pretrain_metrics.log   one JSON record per burn-in iteration
/// <root>/timing.log             wall time per iteration
/// <root>/reports/  curves/
/// ```
pub struct ExperimentDir {
    pub root: PathBuf,
}

impl ExperimentDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn snapshot(&self) -> PathBuf {
        self.root.join(SNAPSHOT)
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("pretrain.ckpt")
    }

    pub fn adapt_checkpoint(&self, iteration: u64) -> PathBuf {
        self.checkpoints().join(format!("adapt_{iteration:06}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("adapt_final.ckpt")
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.root.join("metrics.log")
    }

    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("pretrain_metrics.log")
    }

    pub fn timing_log(&self) -> PathBuf {
        self.root.join("timing.log")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn curves(&self) -> PathBuf {
        self.root.join("curves")
    }

    /// Resolves the effective config: `--config`, else the snapshot, else the reference
    /// defaults, then the seed override. A config that contradicts an existing snapshot is
    /// refused; `allow_replace` lets data generation start the directory over.
    pub fn resolve_config(&self, explicit: Option<&Path>, seed: Option<u64>, allow_replace: bool) -> Result<(ExperimentConfig, bool)> {
        let snapshot = if self.snapshot().exists() { Some(ExperimentConfig::load(&self.snapshot())?) } else { None };
        let mut cfg = match (explicit, &snapshot) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Some(s)) => s.clone(),
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
        }
        cfg.validate()?;
        let replaces = matches!(&snapshot, Some(s) if *s != cfg);
        if replaces && !allow_replace {
            return Err(Error::InvalidConfig(format!(
                "config differs from the snapshot in {}; regenerate the experiment with `gen-data --force` or use another --out",
                self.root.display()
            )));
        }
        Ok((cfg, snapshot.is_none() || replaces))
    }

    pub fn write_snapshot(&self, cfg: &ExperimentConfig) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        write_atomic(&self.snapshot(), cfg.to_toml().as_bytes())
    }

    /// Removes every output this tool writes, leaving unrelated files alone.
    pub fn clear_outputs(&self) -> Result<()> {
        for d in [self.datasets(), self.checkpoints(), self.reports(), self.curves()] {
            if d.exists() {
                fs::remove_dir_all(d)?;
            }
        }
        for f in [self.snapshot(), self.metrics_log(), self.pretrain_log(), self.timing_log()] {
            if f.exists() {
                fs::remove_file(f)?;
            }
        }
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// File-name-safe form of a row name.
pub fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}
