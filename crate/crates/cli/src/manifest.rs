//! Run manifests: every subcommand records its resolved configuration,
//! inputs, outputs and timing next to its primary output, atomically.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    /// Argv after the binary name; replaying it reproduces the outputs.
    pub argv: Vec<String>,
    /// Fully resolved configuration (defaults + config file + flags).
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

pub struct ManifestBuilder {
    subcommand: String,
    seed: Option<u64>,
    argv: Vec<String>,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, argv: &[String]) -> Self {
        ManifestBuilder {
            subcommand: subcommand.to_string(),
            seed: None,
            argv: argv.to_vec(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn config(&mut self, value: serde_json::Value) -> &mut Self {
        self.config = value;
        self
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.inputs.push(path.as_ref().display().to_string());
        self
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> &mut Self {
        self.outputs.push(path.as_ref().display().to_string());
        self
    }

    /// Write `<stem>.manifest.json` atomically (temp file + rename).
    pub fn write(&self, next_to: impl AsRef<Path>) -> Result<PathBuf> {
        let manifest = RunManifest {
            tool: "regrid".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.subcommand.clone(),
            seed: self.seed,
            argv: self.argv.clone(),
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let target = manifest_path(next_to.as_ref());
        let tmp = target.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &target)
            .with_context(|| format!("renaming into {}", target.display()))?;
        Ok(target)
    }
}

/// `<stem>.manifest.json` beside the given output path.
pub fn manifest_path(output: &Path) -> PathBuf {
    let stem = match output.extension() {
        Some(_) => output.with_extension(""),
        None => output.to_path_buf(),
    };
    let mut s = stem.into_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path.as_ref())
        .with_context(|| format!("reading {}", path.as_ref().display()))?;
    Ok(serde_json::from_str(&text)?)
}
