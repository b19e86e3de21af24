//! Config files and flag overrides. Flags always win over the file.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use pchier_core::data::PresetKind;
use pchier_core::network::ArchitectureConfig;
use pchier_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Invalid invocation; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Read `path` as a `T`, or as the `config` field of a run manifest written
/// by `command`.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {} is not JSON: {e}", path.display())))?;
    let value = match value.get("command").and_then(|c| c.as_str()) {
        Some(c) if c == command => value.get("config").cloned().unwrap_or_default(),
        Some(c) => return Err(usage(format!("{} is a manifest of `{c}`, not `{command}`", path.display()))),
        None => value,
    };
    serde_json::from_value(value).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub preset: PresetKind,
    pub points: usize,
    pub frames: usize,
    pub seeds: Vec<u64>,
    pub velocity: [f64; 3],
    pub omega: f64,
    pub amplitude: f64,
    pub period: f64,
    pub noise_sigma: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let p = pchier_core::data::MotionPreset::new(PresetKind::RigidTranslation, 0);
        Self {
            preset: p.kind,
            points: 256,
            frames: 12,
            seeds: vec![0],
            velocity: p.velocity,
            omega: p.omega,
            amplitude: p.amplitude,
            period: p.period,
            noise_sigma: p.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub architecture: ArchitectureConfig,
    pub training: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub warmup: usize,
    pub emd_cap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { warmup: 1, emd_cap: 512 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeConfig {
    pub frame: Option<usize>,
}

/// `a..b` (inclusive) or a comma-separated list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || usage(format!("invalid seed list `{s}`; use `a..b` or `a,b,c`"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

/// `64,32;32,32` → `[[64, 32], [32, 32]]`.
pub fn parse_fp_widths(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|stage| {
            stage
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| usage(format!("invalid fp widths `{s}`"))))
                .collect()
        })
        .collect()
}
