use std::fs;
use std::path::{Path, PathBuf};

use oneclick_core::{EngineConfig, NoiseProfile};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("engine: {0}")]
    Engine(#[from] oneclick_core::model::ModelError),
    #[error("noise: {0}")]
    Noise(#[from] oneclick_core::detector::ProfileError),
}

/// Service configuration file. Relative paths resolve against the file's
/// own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// Ground truth: native JSON and/or VOC XML files.
    pub dataset_dir: PathBuf,
    /// Where image files named by each image's `uri` live. Defaults to
    /// `dataset_dir`.
    #[serde(default)]
    pub image_dir: Option<PathBuf>,
    #[serde(default)]
    pub noise: NoiseProfile,
    #[serde(default)]
    pub engine: EngineConfig,
    /// Append-only session journal. Sessions are in-memory only without it.
    #[serde(default)]
    pub journal: Option<PathBuf>,
    /// Built UI bundle, served for any path the API does not claim.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(dataset_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset_dir: dataset_dir.into(),
            image_dir: None,
            noise: NoiseProfile::default(),
            engine: EngineConfig::default(),
            journal: None,
            static_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ServiceConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset_dir);
        cfg.image_dir.as_mut().map(resolve);
        cfg.journal.as_mut().map(resolve);
        cfg.static_dir.as_mut().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.engine.validate()?;
        self.noise.validate()?;
        Ok(())
    }

    pub fn image_dir(&self) -> &Path {
        self.image_dir.as_deref().unwrap_or(&self.dataset_dir)
    }
}
