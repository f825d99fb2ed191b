// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration shared by all subcommands.
//!
//! Values come from built-in defaults, then an optional JSON config file,
//! then explicit command-line overrides, each layer winning over the last.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::lens::{DEFAULT_LAYER_THRESHOLD, DEFAULT_WINDOW};
use crate::norms::DEFAULT_TRUNCATE_LEN;
use crate::probe::{LogisticConfig, PcaConfig, SplitConfig};

pub const DEFAULT_RESAMPLES: u64 = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("config value out of range: {0}")]
    Range(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub norms: Option<PathBuf>,
    pub sequences: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub dump: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub truncate_len: usize,
    pub window: (i32, i32),
    pub layer_threshold: usize,
    pub pca: PcaConfig,
    pub logreg: LogisticConfig,
    pub split: SplitConfig,
    pub top_k: usize,
    pub resamples: u64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            norms: None,
            sequences: None,
            manifest: None,
            dump: None,
            head: None,
            embeddings: None,
            out_dir: None,
            truncate_len: DEFAULT_TRUNCATE_LEN,
            window: DEFAULT_WINDOW,
            layer_threshold: DEFAULT_LAYER_THRESHOLD,
            pca: PcaConfig::default(),
            logreg: LogisticConfig::default(),
            split: SplitConfig::default(),
            top_k: 3,
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |ok: bool, msg: String| if ok { Ok(()) } else { Err(ConfigError::Range(msg)) };
        range(self.truncate_len >= 2, format!("truncate_len {} < 2", self.truncate_len))?;
        range(
            self.window.0 < 0 && self.window.1 >= 0,
            format!("window {:?} must satisfy lo < 0 <= hi", self.window),
        )?;
        range(
            self.pca.variance_target > 0.0 && self.pca.variance_target <= 1.0,
            format!("pca.variance_target {} not in (0, 1]", self.pca.variance_target),
        )?;
        range(self.pca.k_max >= 1, "pca.k_max must be positive".into())?;
        range(
            self.logreg.l2_lambda >= 0.0 && self.logreg.l2_lambda.is_finite(),
            format!("logreg.l2_lambda {} must be non-negative", self.logreg.l2_lambda),
        )?;
        range(self.logreg.tol > 0.0, format!("logreg.tol {} must be positive", self.logreg.tol))?;
        range(self.logreg.max_iters >= 1, "logreg.max_iters must be positive".into())?;
        range(
            self.split.frac > 0.0 && self.split.frac < 1.0,
            format!("split.frac {} not in (0, 1)", self.split.frac),
        )?;
        range(self.split.repeats >= 1, "split.repeats must be positive".into())?;
        range(self.top_k >= 1, "top_k must be positive".into())?;
        range(self.resamples >= 1, "resamples must be positive".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.truncate_len, 35);
        assert_eq!(c.window, (-3, 2));
        assert_eq!(c.layer_threshold, 39);
        assert_eq!(c.pca.variance_target, 0.95);
        assert_eq!(c.pca.k_max, 50);
        assert_eq!(c.logreg.l2_lambda, 1e-2);
        assert_eq!(c.split.frac, 0.8);
        assert_eq!(c.resamples, 10_000);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 7, "split": {"frac": 0.7, "repeats": 1}}"#, "x").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.split.repeats, 1);
        assert_eq!(c.truncate_len, 35);
    }

    #[test]
    fn rejects_unknown_and_out_of_range() {
        assert!(matches!(RunConfig::from_json(r#"{"sede": 7}"#, "x"), Err(ConfigError::Parse { .. })));
        assert!(matches!(
            RunConfig::from_json(r#"{"window": [1, 2]}"#, "x"),
            Err(ConfigError::Range(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"resamples": 0}"#, "x"),
            Err(ConfigError::Range(_))
        ));
    }
}
