//! Experiment harness: config parsing, the (model, window, horizon) grid,
//! checkpoints, metrics and result tables.

pub mod checkpoint;
pub mod config;
pub mod grid;
pub mod report;
pub mod selftest;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classical::{ClassicalError, ClassicalModel};
use crate::data::{self, DataError, PreparedData, PriceSeries, SynthKind};
use crate::metrics::{self, MetricError};
use crate::models::{ModelError, NeuralModel, Variant};
use crate::train::{self, EpochLog, TrainError};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, DataSource, ExperimentConfig, RunConfig};
pub use grid::{run_grid, GridError, GridRun};
pub use report::{GridResult, TableRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

pub(crate) fn io_err(path: &Path, e: impl fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Every model the grid knows about, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelId {
    Neural(Variant),
    Svr,
    RandomForest,
}

impl ModelId {
    pub const ALL: [ModelId; 9] = [
        ModelId::Neural(Variant::EncoderOnly),
        ModelId::Neural(Variant::DecoderOnly),
        ModelId::Neural(Variant::Vanilla),
        ModelId::Neural(Variant::VanillaNoEmbedding),
        ModelId::Neural(Variant::VanillaProbSparse),
        ModelId::Neural(Variant::Lstm),
        ModelId::Neural(Variant::Tcn),
        ModelId::Svr,
        ModelId::RandomForest,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Self::Neural(v) => v.id(),
            Self::Svr => "svr",
            Self::RandomForest => "rf",
        }
    }

    /// Human-readable label used in markdown tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::Neural(Variant::EncoderOnly) => "Transformer (encoder only)",
            Self::Neural(Variant::DecoderOnly) => "Transformer (decoder only)",
            Self::Neural(Variant::Vanilla) => "Transformer (encoder-decoder)",
            Self::Neural(Variant::VanillaNoEmbedding) => "Transformer (no input embedding)",
            Self::Neural(Variant::VanillaProbSparse) => "Transformer (ProbSparse)",
            Self::Neural(Variant::Lstm) => "LSTM",
            Self::Neural(Variant::Tcn) => "TCN",
            Self::Svr => "SVR",
            Self::RandomForest => "Random forest",
        }
    }

    /// Position in [`ModelId::ALL`]; the final tie-breaker when ranking.
    pub fn order(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).expect("ALL lists every model")
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| {
                let ids: Vec<_> = Self::ALL.iter().map(|m| m.id()).collect();
                format!("unknown model `{s}` (expected one of {})", ids.join(", "))
            })
    }
}

impl Serialize for ModelId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for ModelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One grid position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub model: ModelId,
    pub window: usize,
    pub horizon: usize,
}

impl CellKey {
    pub fn new(model: ModelId, window: usize, horizon: usize) -> Self {
        Self { model, window, horizon }
    }

    /// Directory name under `cells/`.
    pub fn dir_name(&self) -> String {
        format!("{}_{}_{}", self.model.id(), self.window, self.horizon)
    }

    /// Seed derived from the base seed and the cell coordinates only, so a
    /// cell's result does not depend on which other cells run or in what order.
    pub fn seed(&self, base: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(base.to_le_bytes());
        h.update(self.model.id().as_bytes());
        h.update((self.window as u64).to_le_bytes());
        h.update((self.horizon as u64).to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} w={} h={}", self.model, self.window, self.horizon)
    }
}

impl FromStr for CellKey {
    type Err = String;

    /// Accepts `model,w,h` or the directory form `model_w_h`.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = if s.contains(',') {
            s.split(',').map(str::trim).collect()
        } else {
            let mut it = s.rsplitn(3, '_').collect::<Vec<_>>();
            it.reverse();
            it
        };
        let [m, w, h] = parts.as_slice() else {
            return Err(format!("expected `model,window,horizon`, got `{s}`"));
        };
        let num = |x: &str| x.parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
        Ok(Self::new(m.parse()?, num(w)?, num(h)?))
    }
}

impl DataSource {
    pub fn load(&self) -> Result<PriceSeries, HarnessError> {
        match self {
            Self::Csv { path } => Ok(data::load_csv(path)?),
            Self::Synthetic { kind, n, seed } => {
                let kind: SynthKind = kind.parse().map_err(|e: DataError| ConfigError::Invalid(e.to_string()))?;
                Ok(data::synth_series(kind, *n, *seed))
            }
        }
    }
}

/// A fitted model of any family.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Neural(NeuralModel),
    Classical(ClassicalModel),
}

impl TrainedModel {
    /// Rows of `h` normalized predictions for row-major windows.
    pub fn predict_batch(&self, windows: &[f64]) -> Result<Vec<Vec<f64>>, HarnessError> {
        Ok(match self {
            Self::Neural(m) => m.predict_batch(windows)?,
            Self::Classical(m) => m.predict_batch(windows)?,
        })
    }
}

/// Error metrics of one cell on the test split, pooled over every forecast
/// step, in normalized and price units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub mae_price: f64,
    pub mse_price: f64,
    pub n_windows: usize,
}

/// Scores normalized predictions (one row per test window) against the test
/// split. Price-unit errors use the raw closes, not inverted targets.
pub fn evaluate(predictions: &[Vec<f64>], data: &PreparedData) -> Result<MetricsReport, HarnessError> {
    let test = &data.test;
    if predictions.len() != test.len() || predictions.iter().any(|p| p.len() != test.h) {
        return Err(MetricError::LengthMismatch {
            predicted: predictions.iter().map(Vec::len).sum(),
            actual: test.targets.len(),
        }
        .into());
    }
    let flat: Vec<f64> = predictions.iter().flatten().copied().collect();
    let closes = data.test_series.closes();
    let actual_price: Vec<f64> = (0..test.len())
        .flat_map(|i| test.target_source(i).map(|s| closes[s - test.offset]))
        .collect();
    let predicted_price = data.norm.invert_all(&flat);
    Ok(MetricsReport {
        mae: metrics::mae(&flat, &test.targets)?,
        mse: metrics::mse(&flat, &test.targets)?,
        mae_price: metrics::mae(&predicted_price, &actual_price)?,
        mse_price: metrics::mse(&predicted_price, &actual_price)?,
        n_windows: test.len(),
    })
}

/// One-step-ahead prediction for a test window, in price units.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub date: NaiveDate,
    pub actual_price: f64,
    pub predicted_price: f64,
}

/// First-step predictions for every test window, dated by the target day.
pub fn prediction_rows(predictions: &[Vec<f64>], data: &PreparedData) -> Vec<PredictionRow> {
    let test = &data.test;
    let (dates, closes) = (data.test_series.dates(), data.test_series.closes());
    predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let at = test.target_source(i).start - test.offset;
            PredictionRow {
                date: dates[at],
                actual_price: closes[at],
                predicted_price: data.norm.invert(p[0]),
            }
        })
        .collect()
}

pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["date", "actual_price", "predicted_price"])
        .map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            r.actual_price.to_string(),
            r.predicted_price.to_string(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| io_err(path, "short record"));
        let num = |i: usize| -> Result<f64, HarnessError> { field(i)?.parse().map_err(|e| io_err(path, e)) };
        out.push(PredictionRow {
            date: NaiveDate::parse_from_str(field(0)?, "%Y-%m-%d").map_err(|e| io_err(path, e))?,
            actual_price: num(1)?,
            predicted_price: num(2)?,
        });
    }
    Ok(out)
}

/// Output of fitting one cell.
#[derive(Debug, Clone)]
pub struct CellFit {
    pub model: TrainedModel,
    pub curve: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Fits one cell's model on the prepared training windows.
pub fn fit_cell(cfg: &ExperimentConfig, key: CellKey, data: &PreparedData) -> Result<CellFit, HarnessError> {
    let seed = key.seed(cfg.seed);
    let (w, h) = (key.window, key.horizon);
    let train_rows = &data.train;
    Ok(match key.model {
        ModelId::Neural(v) => {
            let model = NeuralModel::build(cfg.neural.model_config(v, w, h, seed))?;
            let tc = train::TrainConfig { seed, ..cfg.train.clone() };
            let out = train::train(model, train_rows, &tc)?;
            CellFit {
                model: TrainedModel::Neural(out.model),
                curve: out.curve,
                best_epoch: Some(out.best_epoch),
            }
        }
        ModelId::Svr => CellFit {
            model: TrainedModel::Classical(ClassicalModel::fit_svr(
                &train_rows.inputs,
                w,
                &train_rows.targets,
                h,
                &cfg.svr.params(),
            )?),
            curve: Vec::new(),
            best_epoch: None,
        },
        ModelId::RandomForest => CellFit {
            model: TrainedModel::Classical(ClassicalModel::fit_forest(
                &train_rows.inputs,
                w,
                &train_rows.targets,
                h,
                &cfg.forest.params(seed),
            )?),
            curve: Vec::new(),
            best_epoch: None,
        },
    })
}
