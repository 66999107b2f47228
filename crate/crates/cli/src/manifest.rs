use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use dream::checkpoint::write_atomic;
use dream::Result;
use serde::{Deserialize, Serialize};

use crate::config::FlatConfig;

/// Record of one command invocation, written when the command finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    /// Effective configuration, flat dotted keys.
    pub config: FlatConfig,
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn begin(command: &str, seed: u64, config: FlatConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            started: now(),
            finished: String::new(),
            config,
            metrics: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn artifact(&mut self, name: impl Into<String>, path: &Path) {
        self.artifacts.insert(name.into(), path.display().to_string());
    }

    /// Stamps the end time and writes the manifest atomically.
    pub fn finish(mut self, path: &Path) -> Result<Self> {
        self.finished = now();
        write_json(path, &self)?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| dream::DreamError::Input(format!("{}: {e}", path.display())))
    }
}

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// `out.ppm` -> `out.ppm.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
