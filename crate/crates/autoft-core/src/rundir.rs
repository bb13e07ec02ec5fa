//! Run-directory layout.
//!
//! Every training run owns one directory:
//! - `config.toml`: frozen snapshot of the fully resolved run config,
//!   written before any training step
//! - `metrics.jsonl`: one JSON object per line (epoch, split, auc,
//!   logloss, tau)
//! - `checkpoint.bin`: best-validation checkpoint
//! - `routes.csv`: test-split route dump (AutoFT stages only), one row
//!   per instance: `id,p_e,p_c,p_d` with bit strings, 1 = pretrained
//! - `final_metrics.json`: method name, seed and target-test metrics,
//!   consumed by the results table
//!
//! Directories are append-only: re-running into a non-empty directory
//! requires an explicit overwrite flag.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::RunMetrics;
use crate::policy::RouteBits;
use crate::training::{EpochRecord, RunConfig};

#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates (or reuses, with `overwrite`) a run directory. A non-empty
    /// existing directory without `overwrite` is a config error.
    pub fn create(path: &Path, overwrite: bool) -> Result<Self> {
        if path.exists() {
            let non_empty = fs::read_dir(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?
                .next()
                .is_some();
            if non_empty && !overwrite {
                return Err(Error::Config(format!(
                    "run directory {} is not empty (pass --overwrite to reuse it)",
                    path.display()
                )));
            }
        }
        fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.is_dir() {
            return Err(Error::Config(format!("{} is not a run directory", path.display())));
        }
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path.join("checkpoint.bin")
    }

    pub fn routes_path(&self) -> PathBuf {
        self.path.join("routes.csv")
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, contents).map_err(|e| Error::io(p.display().to_string(), e))
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let text = toml::to_string_pretty(cfg)
            .map_err(|e| Error::Config(format!("config serialize: {e}")))?;
        self.write("config.toml", text)
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        let p = self.path.join("config.toml");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn write_metrics(&self, history: &[EpochRecord]) -> Result<()> {
        let mut out = String::new();
        for record in history {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::Config(format!("metrics serialize: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        }
        self.write("metrics.jsonl", out)
    }

    /// Route dump: `id,p_e,p_c,p_d`, bits in unit order, 1 = pretrained.
    pub fn write_route_dump(&self, routes: &[RouteBits]) -> Result<()> {
        let mut out = String::from("id,p_e,p_c,p_d\n");
        for (id, r) in routes.iter().enumerate() {
            let bits = |v: &[u8]| v.iter().map(|b| char::from(b'0' + b)).collect::<String>();
            out.push_str(&format!("{id},{},{},{}\n", bits(&r.embed), bits(&r.cross), bits(&r.deep)));
        }
        self.write("routes.csv", out)
    }

    pub fn read_route_dump(&self) -> Result<String> {
        let p = self.routes_path();
        fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))
    }

    pub fn write_final_metrics(&self, metrics: &RunMetrics) -> Result<()> {
        let text = serde_json::to_string_pretty(metrics)
            .map_err(|e| Error::Config(format!("final metrics serialize: {e}")))?;
        self.write("final_metrics.json", text)
    }

    pub fn read_final_metrics(&self) -> Result<RunMetrics> {
        let p = self.path.join("final_metrics.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("final metrics parse: {e}")))
    }
}

/// Reads `final_metrics.json` from every given run directory.
pub fn collect_run_metrics(dirs: &[PathBuf]) -> Result<Vec<RunMetrics>> {
    dirs.iter()
        .map(|d| RunDir::open(d)?.read_final_metrics())
        .collect()
}
