use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{CliError, CliResult, Outcome, EXIT_INTERNAL};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// False for reports that embed timings.
    pub reproducible: bool,
}

impl FileDigest {
    fn of(path: &Path, reproducible: bool) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::from(crate::Error::Io(e)))?;
        Ok(Self { path: path.display().to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64, reproducible })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Record of one CLI run: enough to repeat it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    /// Fully merged settings (config file plus flags).
    pub config: Value,
    pub seed: Option<u64>,
    /// Directory that relative paths in `config` are resolved against.
    pub working_dir: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub summary: Value,
    pub wall_ms: u64,
}

pub(super) fn default_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

impl RunManifest {
    pub(super) fn build(command: &str, config: Value, seed: Option<u64>, outcome: &Outcome, wall_ms: u64) -> CliResult<Self> {
        let inputs = outcome.inputs.iter().map(|p| FileDigest::of(p, true)).collect::<CliResult<Vec<_>>>()?;
        let mut outputs = Vec::new();
        for p in &outcome.outputs {
            outputs.push(FileDigest::of(p, !outcome.volatile_outputs.contains(p))?);
        }
        Ok(Self {
            manifest_version: MANIFEST_VERSION,
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seed,
            working_dir: std::env::current_dir().ok().map(|d| d.display().to_string()),
            inputs,
            outputs,
            summary: outcome.summary.clone(),
            wall_ms,
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError { code: EXIT_INTERNAL, message: e.to_string() })?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::from(crate::Error::Io(e)))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from(crate::Error::Io(e)))?;
        serde_json::from_str(&text).map_err(|e| CliError::from(crate::Error::Json(e)))
    }

    /// Paths of reproducible outputs whose current contents differ from
    /// the recorded digest.
    pub fn verify_outputs(&self) -> CliResult<Vec<String>> {
        let mut bad = Vec::new();
        for o in self.outputs.iter().filter(|o| o.reproducible) {
            let now = FileDigest::of(Path::new(&o.path), true)?;
            if now.sha256 != o.sha256 {
                bad.push(o.path.clone());
            }
        }
        Ok(bad)
    }
}
