//! Run manifest: written before any result file, finalized on exit.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use progfuse::config::ExperimentConfig;

pub const GIT_DESCRIBE: &str = env!("PROGFUSE_GIT_DESCRIBE");

/// A file input identified by path and content hash.
#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> std::io::Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub verb: String,
    pub argv: Vec<String>,
    pub version: String,
    pub git_describe: String,
    pub config_hash: String,
    /// full config text; the run is reproducible from this alone
    pub config: String,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort: Option<InputFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<InputFile>,
    pub lanes: usize,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub artifacts: Vec<String>,
    #[serde(skip)]
    path: PathBuf,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl Manifest {
    pub fn start(verb: &str, out: &Path, config: &ExperimentConfig) -> std::io::Result<Self> {
        fs::create_dir_all(out)?;
        Ok(Self {
            verb: verb.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_describe: GIT_DESCRIBE.to_string(),
            config_hash: config.hash(),
            config: config.to_toml(),
            seeds: config.seeds.clone(),
            rates: None,
            cohort: None,
            checkpoint: None,
            lanes: rayon::current_num_threads(),
            started_at: now(),
            finished_at: None,
            status: "running".into(),
            artifacts: Vec::new(),
            path: out.join("manifest.json"),
        })
    }

    pub fn write(&self) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&self.path, text + "\n")
    }

    pub fn artifact(&mut self, path: &Path) {
        let dir = self.path.parent().unwrap_or(Path::new(""));
        let rel = path.strip_prefix(dir).unwrap_or(path);
        self.artifacts.push(rel.display().to_string());
    }

    pub fn finish(&mut self, status: &str) -> std::io::Result<()> {
        self.finished_at = Some(now());
        self.status = status.to_string();
        self.write()
    }
}
