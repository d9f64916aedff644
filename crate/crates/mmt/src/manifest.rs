//! Run manifests: everything needed to reproduce a command invocation.

use std::path::Path;
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub git_describe: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: Option<u64>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `git describe --always --dirty` of the working directory, or `unknown`.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn start(config: &ExperimentConfig) -> Self {
        Self {
            variant: config.variant.name().into(),
            seed: config.train.seed,
            config: config.entries().into_iter().map(|(k, v)| (k.into(), v)).collect(),
            git_describe: git_describe(),
            started: unix_now(),
            finished: None,
        }
    }

    /// Writes the manifest to a file that must not exist yet.
    pub fn write_new(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        let mut file = std::fs::OpenOptions::new().write(true).create_new(true).open(path).at(path)?;
        std::io::Write::write_all(&mut file, json.as_bytes()).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        let m = RunManifest::start(&ExperimentConfig::default());
        m.write_new(&p).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
        assert!(m.write_new(&p).is_err());
        assert_eq!(m.variant, "cbn_pool5");
        assert!(m.config.iter().any(|(k, v)| k == "Learning rate" && v == "0.0004"));
    }
}
