use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

/// Written once per run as `manifest.json`. Everything but
/// `wall_clock_seconds` is a function of the inputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub config: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub passed: bool,
    pub wall_clock_seconds: f64,
    pub version: String,
}

/// Collects artifacts for one run in an output directory.
pub struct Run {
    out: PathBuf,
    started: Instant,
    artifacts: Vec<String>,
}

impl Run {
    pub fn new(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run { out: out.to_path_buf(), started: Instant::now(), artifacts: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(name.to_string());
        Ok(path)
    }

    pub fn finish(
        self,
        command: &str,
        model: Option<&Path>,
        config: Value,
        seed: Option<u64>,
        passed: bool,
    ) -> Result<()> {
        let manifest = RunManifest {
            command: command.into(),
            model: model.map(|p| p.display().to_string()),
            config,
            seed,
            artifacts: self.artifacts,
            passed,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").into(),
        };
        let path = self.out.join("manifest.json");
        fs::write(&path, pdmg_core::io::to_json(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
