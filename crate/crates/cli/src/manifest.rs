use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use zaplab_core::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Source revision baked in at build time.
pub fn source_revision() -> String {
    format!("zaplab {} ({})", env!("CARGO_PKG_VERSION"), env!("ZAPLAB_SOURCE_REV"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStatus {
    pub trial: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Self-describing record of one CLI invocation. The resolved config is
/// embedded, so `--manifest` replays the run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub source_revision: String,
    pub pretrain_seeds: Vec<u64>,
    pub transfer_seeds: Vec<u64>,
    pub output_dir: String,
    pub trials: Vec<TrialStatus>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<String>, config: &ExperimentConfig, dataset_hash: String, out: &Path) -> Self {
        let sweep = config.sweep.clone().unwrap_or_default();
        let or = |v: Vec<u64>, d: u64| if v.is_empty() { vec![d] } else { v };
        let (pretrain_seeds, transfer_seeds) = match command {
            "sweep" => (or(sweep.pretrain_seeds, config.pretrain.seed), or(sweep.transfer_seeds, config.transfer.seed)),
            "pretrain" => (vec![config.pretrain.seed], vec![]),
            _ => (vec![config.pretrain.seed], vec![config.transfer.seed]),
        };
        RunManifest {
            command: command.to_string(),
            config_path,
            config: config.clone(),
            config_hash: config.hash(),
            dataset_hash,
            source_revision: source_revision(),
            pretrain_seeds,
            transfer_seeds,
            output_dir: out.display().to_string(),
            trials: Vec::new(),
        }
    }

    pub fn all_ok(&self) -> bool {
        self.trials.iter().all(|t| t.ok)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        m.config.validate()?;
        anyhow::ensure!(
            m.config.hash() == m.config_hash,
            "{}: embedded config does not match its recorded hash",
            path.display()
        );
        Ok(m)
    }
}
