//! Run directory layout and artifact persistence.
//!
//! ```text
//! <run>/config.toml      config as given (or resolved, when none was given)
//! <run>/resolved.toml    every resolved value
//! <run>/config.sha256    hash of the resolved config, output path excluded
//! <run>/checkpoints/     JSON envelopes stamped with format version and hash
//! <run>/datasets/        text datasets
//! <run>/metrics/         CSV records
//! <run>/plots/           SVG figures
//! <run>/report/          rendered report
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use utilgen_core::data::{load_dataset, save_dataset, LabeledDataset};

use crate::config::ExperimentConfig;
use crate::error::{io_err, Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const SUBDIRS: [&str; 5] = ["checkpoints", "datasets", "metrics", "plots", "report"];

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format_version: u32,
    config_hash: String,
    kind: String,
    payload: T,
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
    hash: String,
}

impl RunDir {
    /// Creates (or reuses) a run directory for `config`. A directory that
    /// already holds a different resolved config is refused.
    pub fn open(root: impl AsRef<Path>, config: &ExperimentConfig, source_text: Option<&str>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let hash = config.hash();
        let stamp = root.join("config.sha256");
        if stamp.exists() {
            let existing = fs::read_to_string(&stamp).map_err(io_err(&stamp))?;
            if existing.trim() != hash {
                return Err(Error::Config(format!(
                    "{} belongs to config {}; this config hashes to {hash}",
                    root.display(),
                    existing.trim()
                )));
            }
        }
        for d in SUBDIRS {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let run = Self { root, hash };
        let resolved = config.resolved_toml();
        run.write_text("config.toml", source_text.unwrap_or(&resolved))?;
        run.write_text("resolved.toml", &resolved)?;
        run.write_text("config.sha256", &format!("{}\n", run.hash))?;
        Ok(run)
    }

    /// Opens an existing run directory read-only (no config needed).
    pub fn existing(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let stamp = root.join("config.sha256");
        let hash = fs::read_to_string(&stamp).map_err(io_err(&stamp))?.trim().to_string();
        Ok(Self { root, hash })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        fs::write(&p, text).map_err(io_err(&p))
    }

    pub fn read_text(&self, rel: &str) -> Result<String> {
        let p = self.path(rel);
        fs::read_to_string(&p).map_err(io_err(&p))
    }

    fn checkpoint_path(&self, name: &str) -> String {
        format!("checkpoints/{name}.json")
    }

    pub fn save_checkpoint<T: Serialize>(&self, name: &str, payload: &T) -> Result<()> {
        let env = Envelope {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash: self.hash.clone(),
            kind: name.to_string(),
            payload,
        };
        let text = serde_json::to_string(&env)
            .map_err(|e| Error::Checkpoint { name: name.into(), message: e.to_string() })?;
        self.write_text(&self.checkpoint_path(name), &text)
    }

    pub fn load_checkpoint<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let rel = self.checkpoint_path(name);
        if !self.exists(&rel) {
            return Err(Error::MissingArtifacts(vec![rel]));
        }
        let env: Envelope<T> = serde_json::from_str(&self.read_text(&rel)?)
            .map_err(|e| Error::Checkpoint { name: name.into(), message: e.to_string() })?;
        if env.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint {
                name: name.into(),
                message: format!("format version {} (expected {CHECKPOINT_FORMAT_VERSION})", env.format_version),
            });
        }
        if env.config_hash != self.hash {
            return Err(Error::Checkpoint {
                name: name.into(),
                message: format!("written under config {}, run uses {}", env.config_hash, self.hash),
            });
        }
        Ok(env.payload)
    }

    pub fn save_dataset(&self, name: &str, data: &LabeledDataset) -> Result<()> {
        Ok(save_dataset(data, self.path(&format!("datasets/{name}.txt")))?)
    }

    pub fn load_dataset(&self, name: &str) -> Result<LabeledDataset> {
        let rel = format!("datasets/{name}.txt");
        if !self.exists(&rel) {
            return Err(Error::MissingArtifacts(vec![rel]));
        }
        Ok(load_dataset(self.path(&rel))?)
    }

    pub fn write_metrics(&self, name: &str, table: &Table) -> Result<()> {
        let rel = format!("metrics/{name}.csv");
        let p = self.path(&rel);
        let mut w = csv::Writer::from_path(&p)
            .map_err(|e| Error::Metrics { name: name.into(), message: e.to_string() })?;
        let wrap = |e: csv::Error| Error::Metrics { name: name.into(), message: e.to_string() };
        w.write_record(&table.header).map_err(wrap)?;
        for row in &table.rows {
            w.write_record(row).map_err(wrap)?;
        }
        w.flush().map_err(io_err(&p))
    }

    pub fn read_metrics(&self, name: &str) -> Result<Table> {
        let rel = format!("metrics/{name}.csv");
        if !self.exists(&rel) {
            return Err(Error::MissingArtifacts(vec![rel]));
        }
        let wrap = |e: csv::Error| Error::Metrics { name: name.into(), message: e.to_string() };
        let mut r = csv::Reader::from_path(self.path(&rel)).map_err(wrap)?;
        let header = r.headers().map_err(wrap)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(wrap))
            .collect::<Result<_>>()?;
        Ok(Table { header, rows })
    }
}

/// A delimited metrics table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Value of column `name` in the first row whose `key` column equals each
    /// given value.
    pub fn lookup(&self, keys: &[(&str, &str)], name: &str) -> Option<&str> {
        let idx: Vec<(usize, &str)> = keys.iter().map(|(k, v)| Some((self.column(k)?, *v))).collect::<Option<_>>()?;
        let col = self.column(name)?;
        self.rows.iter().find(|r| idx.iter().all(|(i, v)| r[*i] == *v)).map(|r| r[col].as_str())
    }

    pub fn lookup_f64(&self, keys: &[(&str, &str)], name: &str) -> Option<f64> {
        self.lookup(keys, name)?.parse().ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::with_seed(1).unwrap();
        let run = RunDir::open(dir.path(), &cfg, None).unwrap();
        let v = vec![0.1f64, 1.0 / 3.0, -2.5e-300];
        run.save_checkpoint("v", &v).unwrap();
        assert_eq!(run.load_checkpoint::<Vec<f64>>("v").unwrap(), v);

        let other = ExperimentConfig::with_seed(2).unwrap();
        assert!(matches!(RunDir::open(dir.path(), &other, None), Err(Error::Config(_))));
        let forged = RunDir { root: dir.path().to_path_buf(), hash: other.hash() };
        assert!(matches!(forged.load_checkpoint::<Vec<f64>>("v"), Err(Error::Checkpoint { .. })));
        assert!(matches!(run.load_checkpoint::<Vec<f64>>("absent"), Err(Error::MissingArtifacts(_))));
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::open(dir.path(), &ExperimentConfig::with_seed(1).unwrap(), None).unwrap();
        let mut t = Table::new(&["regime", "source", "accuracy"]);
        t.push(vec!["joint".into(), "base".into(), "0.5".into()]);
        t.push(vec!["joint".into(), "utilgen".into(), "0.75".into()]);
        run.write_metrics("acc", &t).unwrap();
        let back = run.read_metrics("acc").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.lookup_f64(&[("regime", "joint"), ("source", "utilgen")], "accuracy"), Some(0.75));
        assert_eq!(back.lookup(&[("regime", "x")], "accuracy"), None);
    }
}
