use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const RUN_FILE: &str = "run.json";

/// Written next to every command's outputs. Passing it back as `--config`
/// repeats the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub output: String,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub duration_secs: f64,
}

pub struct RunRecorder {
    command: &'static str,
    started: Instant,
    inputs: BTreeMap<String, String>,
}

impl RunRecorder {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn finish(self, config: &impl Serialize, seed: Option<u64>, out: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: serde_json::to_value(config)?,
            inputs: self.inputs,
            output: out.display().to_string(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = out.join(RUN_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}
