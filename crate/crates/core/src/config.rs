//! TOML run configuration. Section keys mirror the field names of
//! [`SeparatorConfig`] and [`TrainConfig`]; unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::separator::SeparatorConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training manifest; relative paths resolve against the config file.
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: SeparatorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Parses `path`; manifest paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train_manifest, &mut cfg.data.val_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The training manifest, or a configuration error naming the key.
    pub fn train_manifest(&self) -> Result<&Path> {
        self.data
            .train_manifest
            .as_deref()
            .ok_or_else(|| Error::Config("missing key `data.train_manifest`".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.features, 256);
        assert_eq!(c.train.lr, 1.5e-4);
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.model = SeparatorConfig::tiny();
        c.train.alpha = 0.5;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn missing_manifest_is_named() {
        let c = RunConfig::default();
        assert!(c.train_manifest().unwrap_err().to_string().contains("data.train_manifest"));
    }
}
