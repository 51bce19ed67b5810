//! Run manifests: one JSON record written next to every command's outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;

/// Provenance record for one tool invocation. Field order is the
/// serialization order, so identical runs produce identical bytes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// Subcommand and flags, exactly as given (program name omitted).
    pub command: Vec<String>,
    /// Fully resolved configuration after defaulting and file overlays.
    pub config: serde_json::Value,
    /// Master seed, for commands that draw randomness.
    pub seed: Option<u64>,
    /// Paths of every artifact the run wrote (the manifest lists its
    /// siblings, not itself).
    pub artifacts: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(config: serde_json::Value, seed: Option<u64>, artifacts: &[&Path]) -> Self {
        RunManifest {
            command: std::env::args().skip(1).collect(),
            config,
            seed,
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Serialize to `path` (pretty-printed, trailing newline).
    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| anyhow::anyhow!("writing manifest {}: {e}", path.display()))
    }
}

/// Manifest path for a command whose `--out` is a single file: a sibling
/// named `<file>.manifest.json`.
pub fn sibling_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Manifest path for a command whose `--out` is a directory.
pub fn dir_manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}
