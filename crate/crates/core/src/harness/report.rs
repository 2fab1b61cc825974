//! Result tables in markdown and CSV.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ModelId, MetricsReport};

/// One model's score in one (window, horizon) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub window: usize,
    pub horizon: usize,
    pub model: ModelId,
    pub mae: f64,
    pub mse: f64,
}

impl TableRow {
    pub fn from_report(model: ModelId, window: usize, horizon: usize, r: &MetricsReport) -> Self {
        Self {
            window,
            horizon,
            model,
            mae: r.mae,
            mse: r.mse,
        }
    }
}

/// Lower MAE wins, then lower MSE, then the earlier model in table order.
pub fn rank(a: &TableRow, b: &TableRow) -> Ordering {
    a.mae
        .total_cmp(&b.mae)
        .then(a.mse.total_cmp(&b.mse))
        .then(a.model.order().cmp(&b.model.order()))
}

/// All completed cells of a grid, ordered by window, horizon, model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridResult {
    pub rows: Vec<TableRow>,
}

pub const CSV_HEADER: [&str; 5] = ["input_window", "horizon", "model", "mae", "mse"];

impl GridResult {
    pub fn new(mut rows: Vec<TableRow>) -> Self {
        rows.sort_by_key(|r| (r.window, r.horizon, r.model.order()));
        Self { rows }
    }

    /// Rows grouped by (window, horizon).
    pub fn cells(&self) -> BTreeMap<(usize, usize), Vec<&TableRow>> {
        let mut m: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for r in &self.rows {
            m.entry((r.window, r.horizon)).or_default().push(r);
        }
        m
    }

    /// Best model of each (window, horizon) cell.
    pub fn winners(&self) -> BTreeMap<(usize, usize), ModelId> {
        self.cells()
            .into_iter()
            .filter_map(|(k, rows)| rows.into_iter().min_by(|a, b| rank(a, b)).map(|r| (k, r.model)))
            .collect()
    }

    /// Markdown table; the winner of each cell is bold.
    pub fn to_markdown(&self) -> String {
        let winners = self.winners();
        let mut s = String::from("| Input window | Horizon | Model | MAE | MSE |\n|---:|---:|:---|---:|---:|\n");
        for r in &self.rows {
            let (mae, mse) = (format!("{:.6}", r.mae), format!("{:.3e}", r.mse));
            if winners.get(&(r.window, r.horizon)) == Some(&r.model) {
                let _ = writeln!(
                    s,
                    "| {} | {} | **{}** | **{mae}** | **{mse}** |",
                    r.window,
                    r.horizon,
                    r.model.label()
                );
            } else {
                let _ = writeln!(s, "| {} | {} | {} | {mae} | {mse} |", r.window, r.horizon, r.model.label());
            }
        }
        s
    }

    /// CSV with full-precision numbers; [`GridResult::from_csv`] reads it back
    /// exactly.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.window.to_string(),
                r.horizon.to_string(),
                r.model.id().to_string(),
                r.mae.to_string(),
                r.mse.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| e.to_string())?;
        if header.iter().ne(CSV_HEADER) {
            return Err(format!("expected header {}, got {:?}", CSV_HEADER.join(","), header));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            let at = |k: usize| rec.get(k).ok_or_else(|| format!("row {}: missing column {k}", i + 1));
            let bad = |e: &dyn std::fmt::Display| format!("row {}: {e}", i + 1);
            rows.push(TableRow {
                window: at(0)?.parse().map_err(|e| bad(&e))?,
                horizon: at(1)?.parse().map_err(|e| bad(&e))?,
                model: at(2)?.parse().map_err(|e| bad(&e))?,
                mae: at(3)?.parse().map_err(|e| bad(&e))?,
                mse: at(4)?.parse().map_err(|e| bad(&e))?,
            });
        }
        Ok(Self::new(rows))
    }
}
