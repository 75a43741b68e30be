//! Run configuration: one JSON document holding every module's knobs, with
//! defaults materialized so the persisted effective config is complete.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use termseek::synth::SynthConfig;
use termseek::train::HyperParams;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub detect_threshold: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { detect_threshold: termseek::search::DEFAULT_DETECT_THRESHOLD }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beta_fa: f64,
    pub tolerance_s: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beta_fa: termseek::eval::DEFAULT_BETA_FA,
            tolerance_s: termseek::eval::DEFAULT_MATCH_TOLERANCE_S,
        }
    }
}

/// The complete run configuration. A single seed funnels every random
/// choice: it is copied into the synth and train sections unless the file
/// sets those explicitly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub synth: SynthConfig,
    pub train: HyperParams,
    pub search: SearchConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 42,
            synth: SynthConfig::default(),
            train: HyperParams::desk_scale(),
            search: SearchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?;
        if config.schema_version != CONFIG_SCHEMA_VERSION {
            anyhow::bail!("unsupported config schema version {}", config.schema_version);
        }
        Ok(config)
    }

    /// Pushes the top-level seed into the per-module seeds.
    pub fn funnel_seed(&mut self, seed: Option<u64>) {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
    }

    /// Writes the fully materialized config next to an output.
    pub fn persist(&self, out: &Path) -> anyhow::Result<std::path::PathBuf> {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".effective-config.json");
        let path = out.with_file_name(name);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    /// Writes the fully materialized config into an output directory.
    pub fn persist_in_dir(&self, dir: &Path) -> anyhow::Result<std::path::PathBuf> {
        let path = dir.join("effective-config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
