use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::CliError;

/// Everything needed to rerun a command: the resolved arguments and config.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        elapsed: Duration,
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config,
            seed,
            version: version(),
            duration_secs: elapsed.as_secs_f64(),
        }
    }

    /// Writes `<artifact>.run.json`.
    pub fn write_next_to(&self, artifact: &Path) -> Result<PathBuf, CliError> {
        let path = sibling(artifact, "run.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

fn version() -> String {
    let pkg = env!("CARGO_PKG_VERSION");
    match option_env!("CVCS_GIT_DESCRIBE") {
        Some(d) => format!("{pkg} ({d})"),
        None => pkg.to_string(),
    }
}

/// `path` with `.ext` appended to the full file name.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(ext);
    path.with_file_name(name)
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = sibling(path, "tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
