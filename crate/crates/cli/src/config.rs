//! The JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use dptrack::data::SceneConfig;
use dptrack::tracker::TrackerConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Default locations used when a flag is omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data: "data".into(), checkpoint: "model.ckpt".into(), output: "out".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub scene: SceneConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Defaults when `path` is `None`; `seed` replaces both seeds.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.tracker.seed = s;
            cfg.scene.seed = s;
        }
        cfg.tracker.validate()?;
        cfg.scene.validate()?;
        Ok(cfg)
    }

    /// Write the resolved config next to an artifact.
    pub fn echo(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// `<artifact>.run.json`.
pub fn echo_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.tracker.lr, 4e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trackr": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"tracker": {"depht": 2}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"paths": {"ckpt": "a"}}"#).is_err());
    }

    #[test]
    fn partial_document_keeps_other_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"tracker": {"steps": 7}}"#).unwrap();
        assert_eq!(cfg.tracker.steps, 7);
        assert_eq!(cfg.tracker.batch_size, TrackerConfig::default().batch_size);
        assert_eq!(cfg.scene, SceneConfig::default());
    }

    #[test]
    fn seed_flag_overrides_both_seeds() {
        let cfg = RunConfig::resolve(None, Some(42)).unwrap();
        assert_eq!((cfg.tracker.seed, cfg.scene.seed), (42, 42));
    }
}
