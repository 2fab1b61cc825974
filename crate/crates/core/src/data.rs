//! Price series ingestion, chronological splitting, min-max scaling and
//! sliding windows.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: {msg}")]
    Invalid { line: u64, msg: String },
    #[error("series has {got} points, need at least {needed}")]
    TooShort { needed: usize, got: usize },
    #[error("training range is degenerate (min {min} == max {max})")]
    DegenerateRange { min: f64, max: f64 },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Daily closes with strictly increasing dates.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    dates: Vec<NaiveDate>,
    closes: Vec<f64>,
}

impl PriceSeries {
    /// Validates order and positivity; line numbers in errors count the
    /// header as line 1.
    pub fn new(dates: Vec<NaiveDate>, closes: Vec<f64>) -> Result<Self> {
        if dates.len() != closes.len() {
            return Err(DataError::Contract(format!(
                "{} dates but {} closes",
                dates.len(),
                closes.len()
            )));
        }
        for (i, &c) in closes.iter().enumerate() {
            if !(c.is_finite() && c > 0.0) {
                return Err(DataError::Invalid {
                    line: i as u64 + 2,
                    msg: format!("close must be positive and finite, got {c}"),
                });
            }
        }
        for (i, pair) in dates.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                let what = if pair[1] == pair[0] { "duplicate date" } else { "date out of order" };
                return Err(DataError::Invalid {
                    line: i as u64 + 3,
                    msg: format!("{what}: {} after {}", pair[1], pair[0]),
                });
            }
        }
        Ok(Self { dates, closes })
    }

    pub fn len(&self) -> usize {
        self.closes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closes.is_empty()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn closes(&self) -> &[f64] {
        &self.closes
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            dates: self.dates[range.clone()].to_vec(),
            closes: self.closes[range].to_vec(),
        }
    }
}

/// Summary statistics in the style of a pandas `describe()`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn describe(values: &[f64]) -> Option<SeriesStats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some(SeriesStats {
        count: values.len(),
        mean,
        std: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Reads a `date,close` CSV with ISO dates.
pub fn load_csv(path: impl AsRef<Path>) -> Result<PriceSeries> {
    let path = path.as_ref();
    let io = |e: &dyn fmt::Display| DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let file = std::fs::File::open(path).map_err(|e| io(&e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| io(&e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["date", "close"] {
        return Err(DataError::Parse {
            line: 1,
            msg: format!("expected header `date,close`, got `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut dates = Vec::new();
    let mut closes = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d").map_err(|e| DataError::Parse {
            line,
            msg: format!("bad date `{}`: {e}", &record[0]),
        })?;
        let close: f64 = record[1].parse().map_err(|e| DataError::Parse {
            line,
            msg: format!("bad close `{}`: {e}", &record[1]),
        })?;
        if !(close.is_finite() && close > 0.0) {
            return Err(DataError::Invalid {
                line,
                msg: format!("close must be positive and finite, got {close}"),
            });
        }
        if let Some(&prev) = dates.last() {
            if date <= prev {
                let what = if date == prev { "duplicate date" } else { "date out of order" };
                return Err(DataError::Invalid {
                    line,
                    msg: format!("{what}: {date} after {prev}"),
                });
            }
        }
        dates.push(date);
        closes.push(close);
    }
    PriceSeries::new(dates, closes)
}

/// Writes a series in the format [`load_csv`] reads; values round-trip exactly.
pub fn write_csv(series: &PriceSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: &dyn fmt::Display| DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    w.write_record(["date", "close"]).map_err(|e| io(&e))?;
    for (d, c) in series.dates.iter().zip(&series.closes) {
        w.write_record([d.format("%Y-%m-%d").to_string(), format!("{c}")])
            .map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

/// First `floor(fraction * N)` points for training, the rest for testing.
pub fn chronological_split(series: &PriceSeries, train_fraction: f64) -> Result<(PriceSeries, PriceSeries)> {
    const MIN_LEN: usize = 10;
    if series.len() < MIN_LEN {
        return Err(DataError::TooShort {
            needed: MIN_LEN,
            got: series.len(),
        });
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Contract(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let cut = (train_fraction * series.len() as f64).floor() as usize;
    if cut == 0 || cut == series.len() {
        return Err(DataError::Contract(format!("split at {cut} leaves an empty side")));
    }
    Ok((series.slice(0..cut), series.slice(cut..series.len())))
}

/// Affine map of the training range onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub min: f64,
    pub max: f64,
}

impl Normalizer {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(DataError::TooShort {
                needed: 2,
                got: values.len(),
            });
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max <= min {
            return Err(DataError::DegenerateRange { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / self.range()
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.range() + self.min
    }

    pub fn apply_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }

    pub fn invert_all(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.invert(y)).collect()
    }
}

/// Supervised pairs cut from a contiguous stretch of a series. Row `i` uses
/// source points `offset + i .. offset + i + w` as input and the following
/// `h` points as target.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub w: usize,
    pub h: usize,
    /// Index in the source series of the first value used.
    pub offset: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len() / self.w
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.w..(i + 1) * self.w]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.h..(i + 1) * self.h]
    }

    /// Source indices covered by row `i`'s input.
    pub fn input_source(&self, i: usize) -> std::ops::Range<usize> {
        self.offset + i..self.offset + i + self.w
    }

    /// Source indices covered by row `i`'s target.
    pub fn target_source(&self, i: usize) -> std::ops::Range<usize> {
        self.offset + i + self.w..self.offset + i + self.w + self.h
    }

    /// Rows `start..end` as a new dataset.
    pub fn rows(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            inputs: self.inputs[range.start * self.w..range.end * self.w].to_vec(),
            targets: self.targets[range.start * self.h..range.end * self.h].to_vec(),
            w: self.w,
            h: self.h,
            offset: self.offset + range.start,
        }
    }
}

/// Every length-`w` input with the `h` values that follow it. `offset` is the
/// position of `values[0]` in the source series and is only recorded.
pub fn make_windows(values: &[f64], w: usize, h: usize, offset: usize) -> Result<WindowedDataset> {
    if w == 0 || h == 0 {
        return Err(DataError::Contract(format!("window {w} and horizon {h} must be positive")));
    }
    if values.len() < w + h {
        return Err(DataError::TooShort {
            needed: w + h,
            got: values.len(),
        });
    }
    let n = values.len() - w - h + 1;
    let mut inputs = Vec::with_capacity(n * w);
    let mut targets = Vec::with_capacity(n * h);
    for i in 0..n {
        inputs.extend_from_slice(&values[i..i + w]);
        targets.extend_from_slice(&values[i + w..i + w + h]);
    }
    Ok(WindowedDataset {
        inputs,
        targets,
        w,
        h,
        offset,
    })
}

/// Everything one experiment cell needs from a series.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train_series: PriceSeries,
    pub test_series: PriceSeries,
    pub norm: Normalizer,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
}

/// Splits chronologically, fits the normalizer on the training part and
/// windows each part on its own so no test value reaches a training row.
pub fn prepare(series: &PriceSeries, train_fraction: f64, w: usize, h: usize) -> Result<PreparedData> {
    let (train_series, test_series) = chronological_split(series, train_fraction)?;
    let norm = Normalizer::fit(train_series.closes())?;
    let train = make_windows(&norm.apply_all(train_series.closes()), w, h, 0)?;
    let test = make_windows(&norm.apply_all(test_series.closes()), w, h, train_series.len())?;
    Ok(PreparedData {
        train_series,
        test_series,
        norm,
        train,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    SineTrend,
    RandomWalk,
    Constant,
}

impl SynthKind {
    pub fn id(self) -> &'static str {
        match self {
            SynthKind::SineTrend => "sine_trend",
            SynthKind::RandomWalk => "random_walk",
            SynthKind::Constant => "constant",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for SynthKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        [SynthKind::SineTrend, SynthKind::RandomWalk, SynthKind::Constant]
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| DataError::Contract(format!("unknown synthetic series kind `{s}`")))
    }
}

/// `n` consecutive weekdays starting 2000-01-03.
pub fn weekdays(n: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Deterministic test series of length `n`.
pub fn synth_series(kind: SynthKind, n: usize, seed: u64) -> PriceSeries {
    let closes: Vec<f64> = match kind {
        SynthKind::SineTrend => (0..n)
            .map(|t| {
                let t = t as f64;
                100.0 + 0.05 * t + 5.0 * (2.0 * std::f64::consts::PI * t / 20.0).sin()
            })
            .collect(),
        SynthKind::RandomWalk => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = 100.0;
            (0..n)
                .map(|t| {
                    if t > 0 {
                        let step: f64 = StandardNormal.sample(&mut rng);
                        x = f64::max(x + step, 1.0);
                    }
                    x
                })
                .collect()
        }
        SynthKind::Constant => vec![100.0; n],
    };
    PriceSeries {
        dates: weekdays(n),
        closes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(closes: &[f64]) -> PriceSeries {
        PriceSeries::new(weekdays(closes.len()), closes.to_vec()).unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = synth_series(SynthKind::SineTrend, 10, 0);
        let (a, b) = chronological_split(&s, 0.7).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert!(a.dates().last() < b.dates().first());
        let s = synth_series(SynthKind::Constant, 2286, 0);
        let (a, b) = chronological_split(&s, 0.7).unwrap();
        assert_eq!((a.len(), b.len()), (1600, 686));
        assert!(matches!(
            chronological_split(&series(&[1.0; 9]), 0.7),
            Err(DataError::TooShort { needed: 10, got: 9 })
        ));
    }

    #[test]
    fn normalizer_endpoints_and_degenerate_range() {
        let n = Normalizer::fit(&[3.0, 7.0, 5.0]).unwrap();
        assert_eq!(n.apply(3.0), 0.0);
        assert_eq!(n.apply(7.0), 1.0);
        assert!(matches!(Normalizer::fit(&[2.0, 2.0]), Err(DataError::DegenerateRange { .. })));
    }

    #[test]
    fn window_counts() {
        let v: Vec<f64> = (0..20).map(f64::from).collect();
        let d = make_windows(&v, 5, 1, 0).unwrap();
        assert_eq!(d.len(), 15);
        assert_eq!(d.input(2), &[2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(d.target(2), &[7.0]);
        assert_eq!(
            make_windows(&v[..6], 5, 5, 0).unwrap_err(),
            DataError::TooShort { needed: 10, got: 6 }
        );
    }

    #[test]
    fn synthetic_series() {
        assert_eq!(synth_series(SynthKind::Constant, 5, 0).closes(), &[100.0; 5]);
        assert_eq!(synth_series(SynthKind::SineTrend, 3, 0).closes()[0], 100.0);
        assert_eq!(
            synth_series(SynthKind::RandomWalk, 50, 4),
            synth_series(SynthKind::RandomWalk, 50, 4)
        );
        assert_ne!(
            synth_series(SynthKind::RandomWalk, 50, 4),
            synth_series(SynthKind::RandomWalk, 50, 5)
        );
        let d = weekdays(6);
        assert_eq!(d[5], NaiveDate::from_ymd_opt(2000, 1, 10).unwrap());
    }

    #[test]
    fn invalid_series_rejected() {
        let d = weekdays(3);
        assert!(PriceSeries::new(d.clone(), vec![1.0, -5.0, 2.0]).is_err());
        let dup = vec![d[0], d[0], d[1]];
        let err = PriceSeries::new(dup, vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn describe_matches_hand_values() {
        let s = describe(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.count, 4);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!((s.min, s.max), (1.0, 4.0));
    }
}
