//! Runs every (model, window, horizon) cell of an experiment, recording
//! progress in a resumable manifest.
//!
//! Output directory layout:
//!
//! ```text
//! <output_dir>/manifest                      JSON: config, config hash, per-cell records
//! <output_dir>/cells/<model>_<w>_<h>/checkpoint
//! <output_dir>/cells/<model>_<w>_<h>/losses.csv       epoch,train_loss,val_loss
//! <output_dir>/cells/<model>_<w>_<h>/metrics.csv      mae,mse,mae_price,mse_price,n_windows
//! <output_dir>/cells/<model>_<w>_<h>/predictions.csv  date,actual_price,predicted_price
//! ```

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::report::{GridResult, TableRow};
use super::{
    evaluate, fit_cell, io_err, prediction_rows, write_predictions, CellKey, Checkpoint, ExperimentConfig, HarnessError,
    MetricsReport, RunConfig,
};
use crate::data::{self, PreparedData, PriceSeries};
use crate::train::EpochLog;

pub const MANIFEST_FILE: &str = "manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("data: {0}")]
    Data(HarnessError),
    #[error("{0}")]
    Io(HarnessError),
    #[error("{path} was written by a different configuration (hash {found}, current {expected}); use a fresh output_dir")]
    ConfigMismatch { path: String, expected: String, found: String },
    #[error("{path}: unreadable manifest: {msg}")]
    Manifest { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: CellKey,
    pub status: CellStatus,
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
    pub epochs: Option<usize>,
    pub best_epoch: Option<usize>,
    pub fit_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Keyed by cell directory name.
    pub cells: BTreeMap<String, CellRecord>,
}

/// SHA-256 of the config's JSON form, as lowercase hex.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            version: MANIFEST_VERSION,
            config_hash: config_hash(&config),
            config,
            cells: BTreeMap::new(),
        }
    }

    pub fn path(output_dir: &Path) -> PathBuf {
        output_dir.join(MANIFEST_FILE)
    }

    pub fn load(output_dir: &Path) -> Result<Self, GridError> {
        let path = Self::path(output_dir);
        let text = std::fs::read_to_string(&path).map_err(|e| GridError::Io(io_err(&path, e)))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| GridError::Manifest {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(GridError::Manifest {
                path: path.display().to_string(),
                msg: format!("unsupported version {}", m.version),
            });
        }
        Ok(m)
    }

    /// Atomic: writes a sibling temp file and renames it over the manifest.
    pub fn save(&self, output_dir: &Path) -> Result<(), HarnessError> {
        let path = Self::path(output_dir);
        let tmp = output_dir.join(format!("{MANIFEST_FILE}.tmp"));
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&tmp, json).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    pub fn record(&self, key: &CellKey) -> Option<&CellRecord> {
        self.cells.get(&key.dir_name())
    }

    pub fn result(&self) -> GridResult {
        GridResult::new(
            self.cells
                .values()
                .filter(|r| r.status == CellStatus::Done)
                .filter_map(|r| {
                    let m = r.metrics.as_ref()?;
                    Some(TableRow::from_report(r.cell.model, r.cell.window, r.cell.horizon, m))
                })
                .collect(),
        )
    }
}

/// All cells of a config in run order: window, then horizon, then model.
pub fn cells(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let mut out = Vec::new();
    for &w in &cfg.windows {
        for &h in &cfg.horizons {
            for &m in &cfg.models {
                out.push(CellKey::new(m, w, h));
            }
        }
    }
    out
}

pub fn cell_dir(output_dir: &Path, key: &CellKey) -> PathBuf {
    output_dir.join("cells").join(key.dir_name())
}

/// What a grid run did.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub result: GridResult,
    pub trained: Vec<CellKey>,
    pub skipped: Vec<CellKey>,
    pub failed: Vec<(CellKey, String)>,
    pub manifest: Manifest,
}

fn write_losses(curve: &[EpochLog], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["epoch", "train_loss", "val_loss"]).map_err(|e| io_err(path, e))?;
    for e in curve {
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()])
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_metrics(m: &MetricsReport, path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.serialize(m).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Prepares data for a cell from an already loaded series.
pub fn prepare_cell(cfg: &ExperimentConfig, series: &PriceSeries, key: &CellKey) -> Result<PreparedData, HarnessError> {
    Ok(data::prepare(series, cfg.train_fraction, key.window, key.horizon)?)
}

fn run_cell(cfg: &ExperimentConfig, series: &PriceSeries, key: CellKey, output_dir: &Path) -> CellRecord {
    let start = Instant::now();
    let seed = key.seed(cfg.seed);
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<_, HarnessError> {
        let data = prepare_cell(cfg, series, &key)?;
        let fit = fit_cell(cfg, key, &data)?;
        let preds = fit.model.predict_batch(&data.test.inputs)?;
        let metrics = evaluate(&preds, &data)?;
        let dir = cell_dir(output_dir, &key);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Checkpoint {
            cell: key,
            norm: data.norm,
            model: fit.model,
        }
        .save(&dir.join("checkpoint"))?;
        write_losses(&fit.curve, &dir.join("losses.csv"))?;
        write_metrics(&metrics, &dir.join("metrics.csv"))?;
        write_predictions(&prediction_rows(&preds, &data), &dir.join("predictions.csv"))?;
        Ok((metrics, fit.curve.len(), fit.best_epoch))
    }));
    let outcome = match outcome {
        Ok(r) => r.map_err(|e| e.to_string()),
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .map_or_else(|| "panic".to_string(), |m| format!("panic: {m}"))),
    };
    let fit_seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((metrics, epochs, best_epoch)) => CellRecord {
            cell: key,
            status: CellStatus::Done,
            seed,
            metrics: Some(metrics),
            error: None,
            epochs: (epochs > 0).then_some(epochs),
            best_epoch,
            fit_seconds,
        },
        Err(e) => CellRecord {
            cell: key,
            status: CellStatus::Failed,
            seed,
            metrics: None,
            error: Some(e),
            epochs: None,
            best_epoch: None,
            fit_seconds,
        },
    }
}

/// Runs every cell not already completed in `run.output_dir`. Failed cells
/// are recorded and retried on the next run; they never abort the grid.
pub fn run_grid(run: &RunConfig, progress: &(dyn Fn(&CellRecord) + Sync)) -> Result<GridRun, GridError> {
    let cfg = &run.experiment;
    let out = run.output_dir.as_path();
    std::fs::create_dir_all(out.join("cells")).map_err(|e| GridError::Io(io_err(out, e)))?;

    let manifest = if Manifest::path(out).exists() {
        let m = Manifest::load(out)?;
        let expected = config_hash(cfg);
        if m.config_hash != expected {
            return Err(GridError::ConfigMismatch {
                path: Manifest::path(out).display().to_string(),
                expected,
                found: m.config_hash,
            });
        }
        m
    } else {
        let m = Manifest::new(cfg.clone());
        m.save(out).map_err(GridError::Io)?;
        m
    };

    let all = cells(cfg);
    let (skipped, pending): (Vec<CellKey>, Vec<CellKey>) = all
        .iter()
        .partition(|k| manifest.record(k).is_some_and(|r| r.status == CellStatus::Done));
    let series = if pending.is_empty() {
        None
    } else {
        Some(cfg.data.load().map_err(GridError::Data)?)
    };

    let manifest = Mutex::new(manifest);
    let next = AtomicUsize::new(0);
    let save_error = Mutex::new(None);
    let worker = || {
        let Some(series) = series.as_ref() else { return };
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(&key) = pending.get(i) else { return };
            let rec = run_cell(cfg, series, key, out);
            progress(&rec);
            let mut m = manifest.lock().expect("manifest lock");
            m.cells.insert(key.dir_name(), rec);
            if let Err(e) = m.save(out) {
                save_error.lock().expect("error lock").get_or_insert(e);
            }
        }
    };
    std::thread::scope(|s| {
        for _ in 1..run.parallelism.min(pending.len().max(1)) {
            s.spawn(worker);
        }
        worker();
    });
    if let Some(e) = save_error.into_inner().expect("error lock") {
        return Err(GridError::Io(e));
    }

    let manifest = manifest.into_inner().expect("manifest lock");
    let failed = pending
        .iter()
        .filter_map(|k| {
            let r = manifest.record(k)?;
            (r.status == CellStatus::Failed).then(|| (*k, r.error.clone().unwrap_or_default()))
        })
        .collect::<Vec<_>>();
    let trained = pending
        .iter()
        .copied()
        .filter(|k| !failed.iter().any(|(f, _)| f == k))
        .collect();
    // Only cells of the current grid count, even if the manifest holds more.
    let mut result = manifest.result();
    result.rows.retain(|r| all.contains(&CellKey::new(r.model, r.window, r.horizon)));
    Ok(GridRun {
        result,
        trained,
        skipped,
        failed,
        manifest,
    })
}

/// Reloads a finished cell from disk and scores it again.
pub fn reevaluate(output_dir: &Path, key: &CellKey) -> Result<(MetricsReport, PreparedData, Vec<Vec<f64>>), GridError> {
    let manifest = Manifest::load(output_dir)?;
    let ck = Checkpoint::load(&cell_dir(output_dir, key).join("checkpoint"))
        .map_err(|e| GridError::Io(HarnessError::Checkpoint(e)))?;
    let series = manifest.config.data.load().map_err(GridError::Data)?;
    let data = prepare_cell(&manifest.config, &series, key).map_err(GridError::Data)?;
    let preds = ck.model.predict_batch(&data.test.inputs).map_err(GridError::Io)?;
    let metrics = evaluate(&preds, &data).map_err(GridError::Io)?;
    Ok((metrics, data, preds))
}
