use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::TrainConfig;
use crate::dataset::write_atomic;
use crate::encoder::{write_checkpoint, EmbeddingState};
use crate::error::Result;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";
pub const CONFIG: &str = "config";

/// Provenance record written next to every metrics file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub run: String,
    pub config: BTreeMap<String, String>,
    pub dataset_checksum: String,
    pub code_version: String,
    pub seed: u64,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub best_epoch: Option<usize>,
    pub checkpoint: Option<String>,
    pub final_metrics: BTreeMap<String, f64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `<out>/<name>/` holding `config`, `manifest.json`, `metrics.jsonl` and
/// `epoch_<k>.ckpt` files.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    pub fn create(out: &Path, name: &str, cfg: &TrainConfig, dataset_checksum: &str) -> Result<Self> {
        let path = out.join(name);
        fs::create_dir_all(&path)?;
        let text = cfg.to_text();
        write_atomic(&path.join(CONFIG), text.as_bytes())?;
        let config = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let manifest = RunManifest {
            run: name.to_string(),
            config,
            dataset_checksum: dataset_checksum.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            started_at: now(),
            finished_at: None,
            best_epoch: None,
            checkpoint: None,
            final_metrics: BTreeMap::new(),
        };
        let header = serde_json::json!({ "run": name, "manifest": MANIFEST });
        write_atomic(&path.join(METRICS), format!("{header}\n").as_bytes())?;
        let dir = Self { path, manifest };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn append_metrics(&mut self, line: &str) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(self.path.join(METRICS))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn checkpoint(&mut self, epoch: usize, state: &EmbeddingState, layers: usize) -> Result<PathBuf> {
        let name = format!("epoch_{epoch}.ckpt");
        let p = self.path.join(&name);
        write_checkpoint(&p, state, layers)?;
        self.manifest.best_epoch = Some(epoch);
        self.manifest.checkpoint = Some(name);
        self.write_manifest()?;
        Ok(p)
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.manifest.checkpoint.as_ref().map(|c| self.path.join(c))
    }

    /// Stamps the final metrics and finish time.
    pub fn finish(&mut self, metrics: BTreeMap<String, f64>) -> Result<()> {
        self.manifest.final_metrics = metrics;
        self.manifest.finished_at = Some(now());
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&self.path.join(MANIFEST), text.as_bytes())
    }
}
