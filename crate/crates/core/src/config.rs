//! Run configuration: one TOML file holding the pyramid, training and
//! evaluation settings plus input/output paths.
//!
//! ```toml
//! [paths]
//! data_root = "data"
//! teacher = "teacher.safetensors"
//! output = "runs"
//! categories = ["bottle", "cable"]   # empty: every directory under data_root
//!
//! [pyramid]
//! blocks = [2, 3, 4]
//! weights = [1.0, 1.0, 1.0]          # optional, defaults to all ones
//!
//! [train]
//! learning_rate = 0.4
//! epochs = 100
//! batch_size = 32
//! input_size = 256
//! val_fraction = 0.2
//! train_fraction = 1.0
//! seed = 0
//! momentum = 0.9
//! weight_decay = 1e-4
//!
//! [eval.pro]
//! fpr_limit = 0.3
//! steps = 200
//! fpr_mode = "pooled"                # or "per-image"
//!
//! [eval.score]
//! smoothing_sigma = 4.0              # optional; off when absent
//! ```
//!
//! Every key is optional. `STFPM_DATA_ROOT`, when set, replaces
//! `paths.data_root`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::PyramidConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::trainer::TrainConfig;

pub const DATA_ROOT_ENV: &str = "STFPM_DATA_ROOT";
pub const SNAPSHOT_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: PathBuf,
    pub teacher: PathBuf,
    pub output: PathBuf,
    pub categories: Vec<String>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            teacher: "teacher.safetensors".into(),
            output: "runs".into(),
            categories: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidSection {
    pub blocks: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Default for PyramidSection {
    fn default() -> Self {
        Self {
            blocks: PyramidConfig::default().blocks,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub pyramid: PyramidSection,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the data-root environment override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.paths.data_root = root.into();
        }
    }

    pub fn pyramid(&self) -> Result<PyramidConfig> {
        match &self.pyramid.weights {
            Some(w) => PyramidConfig::new(self.pyramid.blocks.clone(), w.clone()),
            None => PyramidConfig::uniform(self.pyramid.blocks.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid()?;
        self.train.validate().map_err(|e| match e {
            Error::Usage(msg) => Error::Config(msg),
            other => other,
        })
    }

    /// SHA-256 over every setting that changes numeric results. Paths are
    /// left out so a run can move between machines.
    pub fn fingerprint(&self) -> Result<String> {
        let semantic = (self.pyramid()?, &self.train, &self.eval);
        let text = serde_json::to_string(&semantic).expect("plain data");
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Writes the resolved config (with its fingerprint as a leading comment)
    /// into `dir`.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        let body = format!("# fingerprint: {}\n{}", self.fingerprint()?, self.to_toml());
        std::fs::write(&path, body).map_err(|e| Error::file(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.pyramid().unwrap(), PyramidConfig::default());
    }

    #[test]
    fn round_trip_and_fingerprint() {
        let cfg = RunConfig::from_toml(
            "[pyramid]\nblocks = [2, 3]\n[train]\nepochs = 7\n[eval.pro]\nfpr_mode = \"per-image\"\n",
        )
        .unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint().unwrap(), cfg.fingerprint().unwrap());

        let mut moved = cfg.clone();
        moved.paths.output = "elsewhere".into();
        assert_eq!(moved.fingerprint().unwrap(), cfg.fingerprint().unwrap());
        let mut changed = cfg.clone();
        changed.train.learning_rate = 0.3;
        assert_ne!(changed.fingerprint().unwrap(), cfg.fingerprint().unwrap());
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[pyramid]\nblocks = [3, 2]"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nepochs = 0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nlr = 1"), Err(Error::Config(_))));
    }
}
