use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use groundst::augment::EdaConfig;
use groundst::backend::{BackendOptions, NoiseConfig, DEFAULT_BATCH_SIZE, DEFAULT_CONCURRENCY, DEFAULT_TIMEOUT};
use groundst::mining::SlotSynonyms;

pub const CONFIG_ENV: &str = "GROUNDST_CONFIG";

/// Settings shared by subcommands. Command-line flags override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub backend: BackendSection,
    pub noise: NoiseConfig,
    pub eda: EdaConfig,
    pub pivot_languages: Vec<String>,
    /// Groups of slot names treated as equivalent when copying turns.
    pub synonyms: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub batch_size: usize,
    pub concurrency: usize,
    pub timeout_secs: f64,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            batch_size: DEFAULT_BATCH_SIZE,
            concurrency: DEFAULT_CONCURRENCY,
            timeout_secs: DEFAULT_TIMEOUT.as_secs_f64(),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            backend: BackendSection::default(),
            noise: NoiseConfig::default(),
            eda: EdaConfig::default(),
            pivot_languages: ["zh", "ja", "ko"].map(String::from).to_vec(),
            synonyms: Vec::new(),
        }
    }
}

impl Config {
    /// `--config`, else the path in the environment, else defaults.
    pub fn resolve(flag: Option<&Path>) -> anyhow::Result<(Config, Option<PathBuf>)> {
        let path = flag
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        let Some(path) = path else {
            return Ok((Config::default(), None));
        };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
        let config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok((config, Some(path)))
    }

    pub fn backend_options(&self) -> BackendOptions {
        BackendOptions {
            batch_size: self.backend.batch_size,
            concurrency: self.backend.concurrency,
            timeout: Duration::from_secs_f64(self.backend.timeout_secs),
            seed: self.seed,
            noise: self.noise,
        }
    }

    pub fn slot_synonyms(&self) -> SlotSynonyms {
        let mut table = SlotSynonyms::new();
        for group in &self.synonyms {
            table.add_group(group.iter().cloned());
        }
        table
    }
}
