use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::{CliError, CliResult};

/// Record of one command invocation; enough to re-run it.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        ManifestBuilder {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                config: Value::Null,
                seed: None,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_clock_secs: 0.0,
            },
        }
    }

    pub fn config(&mut self, config: Value) -> &mut Self {
        self.manifest.config = config;
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seed = Some(seed);
        self
    }

    pub fn input(&mut self, p: &Path) -> &mut Self {
        self.manifest.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(&mut self, p: &Path) -> &mut Self {
        self.manifest.outputs.push(p.to_path_buf());
        self
    }

    pub fn finish(mut self) -> RunManifest {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        self.manifest
    }
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|e| CliError::usage(format!("cannot write manifest {}: {e}", path.display())))
    }
}

/// `manifest.<command>.json` inside `dir`.
pub fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("manifest.{command}.json"))
}
