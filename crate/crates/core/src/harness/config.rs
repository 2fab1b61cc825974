//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored; list values are comma-separated;
//! unknown or repeated keys are errors. Relative paths resolve against the
//! directory holding the config file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ModelId;
use crate::classical::{ForestParams, SvrParams};
use crate::data::SynthKind;
use crate::models::{ModelConfig, Pooling, Variant};
use crate::train::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Where the price series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf },
    Synthetic { kind: String, n: usize, seed: u64 },
}

/// Model hyperparameters shared by every cell; window, horizon, variant and
/// seed are filled in per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralSettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub no_embedding_keeps_pe: bool,
    pub sparse_decoder: bool,
    pub sample_factor: f64,
    pub top_factor: f64,
    pub anchor_last: bool,
    pub input_scale: f64,
    pub lstm_layers: usize,
    pub tcn_blocks: usize,
    pub tcn_kernel: usize,
}

impl Default for NeuralSettings {
    fn default() -> Self {
        let c = ModelConfig::new(Variant::Vanilla, 1, 1);
        Self {
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_encoder_layers: c.n_encoder_layers,
            n_decoder_layers: c.n_decoder_layers,
            ffn_dim: c.ffn_dim,
            dropout: c.dropout,
            pooling: c.pooling,
            no_embedding_keeps_pe: c.no_embedding_keeps_pe,
            sparse_decoder: c.sparse_decoder,
            sample_factor: c.sample_factor,
            top_factor: c.top_factor,
            anchor_last: c.anchor_last,
            input_scale: c.input_scale,
            lstm_layers: c.lstm_layers,
            tcn_blocks: c.tcn_blocks,
            tcn_kernel: c.tcn_kernel,
        }
    }
}

impl NeuralSettings {
    pub fn model_config(&self, variant: Variant, window: usize, horizon: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            variant,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            horizon,
            window,
            seed,
            pooling: self.pooling,
            no_embedding_keeps_pe: self.no_embedding_keeps_pe,
            sparse_decoder: self.sparse_decoder,
            sample_factor: self.sample_factor,
            top_factor: self.top_factor,
            anchor_last: self.anchor_last,
            input_scale: self.input_scale,
            lstm_layers: self.lstm_layers,
            tcn_blocks: self.tcn_blocks,
            tcn_kernel: self.tcn_kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrSettings {
    pub c: f64,
    pub epsilon: f64,
    /// `None` means `1 / window`.
    pub gamma: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvrSettings {
    fn default() -> Self {
        let p = SvrParams::default();
        Self {
            c: p.c,
            epsilon: p.epsilon,
            gamma: p.gamma,
            tol: p.tol,
            max_iter: p.max_iter,
        }
    }
}

impl SvrSettings {
    pub fn params(&self) -> SvrParams {
        SvrParams {
            c: self.c,
            epsilon: self.epsilon,
            gamma: self.gamma,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestSettings {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestSettings {
    fn default() -> Self {
        let p = ForestParams::default();
        Self {
            n_trees: p.n_trees,
            max_depth: p.max_depth,
            min_leaf: p.min_leaf,
            max_features: p.max_features,
            bootstrap: p.bootstrap,
        }
    }
}

impl ForestSettings {
    pub fn params(&self, seed: u64) -> ForestParams {
        ForestParams {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
            max_features: self.max_features,
            bootstrap: self.bootstrap,
            seed,
        }
    }
}

/// Everything that determines a grid's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub train_fraction: f64,
    pub models: Vec<ModelId>,
    pub windows: Vec<usize>,
    pub horizons: Vec<usize>,
    pub seed: u64,
    pub train: TrainConfig,
    pub neural: NeuralSettings,
    pub svr: SvrSettings,
    pub forest: ForestSettings,
}

/// A parsed config file: the experiment plus how to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
    pub parallelism: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                kind: SynthKind::SineTrend.id().into(),
                n: 1000,
                seed: 0,
            },
            train_fraction: 0.7,
            models: ModelId::ALL.to_vec(),
            windows: vec![5, 10, 15],
            horizons: vec![1, 5, 10],
            seed: 0,
            train: TrainConfig::default(),
            neural: NeuralSettings::default(),
            svr: SvrSettings::default(),
            forest: ForestSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.models.is_empty() || self.windows.is_empty() || self.horizons.is_empty() {
            return bad("models, windows and horizons must be non-empty".into());
        }
        if self.windows.contains(&0) || self.horizons.contains(&0) {
            return bad("windows and horizons must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for &m in &self.models {
            if let ModelId::Neural(v) = m {
                self.neural
                    .model_config(v, self.windows[0], self.horizons[0], 0)
                    .validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        if let DataSource::Synthetic { kind, n, .. } = &self.data {
            SynthKind::from_str(kind).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if *n == 0 {
                return bad("synth_n must be positive".into());
            }
        }
        Ok(())
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

fn parse_one<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

// "none" or 0 means no limit / default.
fn parse_optional<T: FromStr + PartialEq + Default>(v: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let x: T = parse_one(v)?;
    Ok((x != T::default()).then_some(x))
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut exp = ExperimentConfig::default();
        let mut output_dir = base_dir.join("runs");
        let mut parallelism = 1;
        let mut data_path: Option<PathBuf> = None;
        let (mut synth_kind, mut synth_n, mut synth_seed) = (None, None, None);
        let mut seen = HashSet::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let syntax = |msg: String| ConfigError::Syntax { line, msg };
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| syntax(format!("expected `key = value`, got `{content}`")))?;
            if !seen.insert(key.to_string()) {
                return Err(syntax(format!("key `{key}` given twice")));
            }
            let r: Result<(), String> = (|| {
                let t = &mut exp.train;
                let n = &mut exp.neural;
                match key {
                    "data" => data_path = Some(base_dir.join(value)),
                    "synth_kind" => synth_kind = Some(parse_one::<SynthKind>(value)?.id().to_string()),
                    "synth_n" => synth_n = Some(parse_one(value)?),
                    "synth_seed" => synth_seed = Some(parse_one(value)?),
                    "train_fraction" => exp.train_fraction = parse_one(value)?,
                    "models" => exp.models = parse_list(value)?,
                    "windows" => exp.windows = parse_list(value)?,
                    "horizons" => exp.horizons = parse_list(value)?,
                    "seed" => exp.seed = parse_one(value)?,
                    "output_dir" => output_dir = base_dir.join(value),
                    "parallelism" => parallelism = parse_one(value)?,
                    "learning_rate" => t.learning_rate = parse_one(value)?,
                    "adam_beta1" => t.adam_beta1 = parse_one(value)?,
                    "adam_beta2" => t.adam_beta2 = parse_one(value)?,
                    "adam_eps" => t.adam_eps = parse_one(value)?,
                    "batch_size" => t.batch_size = parse_one(value)?,
                    "max_epochs" => t.max_epochs = parse_one(value)?,
                    "early_stop_patience" => t.early_stop_patience = parse_one(value)?,
                    "gradient_clip_norm" => t.gradient_clip_norm = parse_one(value)?,
                    "validation_fraction" => t.validation_fraction = parse_one(value)?,
                    "d_model" => n.d_model = parse_one(value)?,
                    "n_heads" => n.n_heads = parse_one(value)?,
                    "n_encoder_layers" => n.n_encoder_layers = parse_one(value)?,
                    "n_decoder_layers" => n.n_decoder_layers = parse_one(value)?,
                    "ffn_dim" => n.ffn_dim = parse_one(value)?,
                    "dropout" => n.dropout = parse_one(value)?,
                    "pooling" => {
                        n.pooling = match value {
                            "mean" => Pooling::Mean,
                            "last" => Pooling::Last,
                            _ => return Err(format!("pooling must be `mean` or `last`, got `{value}`")),
                        }
                    }
                    "no_embedding_keeps_pe" => n.no_embedding_keeps_pe = parse_one(value)?,
                    "sparse_decoder" => n.sparse_decoder = parse_one(value)?,
                    "sample_factor" => n.sample_factor = parse_one(value)?,
                    "top_factor" => n.top_factor = parse_one(value)?,
                    "anchor_last" => n.anchor_last = parse_one(value)?,
                    "input_scale" => n.input_scale = parse_one(value)?,
                    "lstm_layers" => n.lstm_layers = parse_one(value)?,
                    "tcn_blocks" => n.tcn_blocks = parse_one(value)?,
                    "tcn_kernel" => n.tcn_kernel = parse_one(value)?,
                    "svr_c" => exp.svr.c = parse_one(value)?,
                    "svr_epsilon" => exp.svr.epsilon = parse_one(value)?,
                    "svr_gamma" => exp.svr.gamma = parse_optional::<f64>(value)?,
                    "svr_tol" => exp.svr.tol = parse_one(value)?,
                    "svr_max_iter" => exp.svr.max_iter = parse_one(value)?,
                    "rf_trees" => exp.forest.n_trees = parse_one(value)?,
                    "rf_max_depth" => exp.forest.max_depth = parse_optional::<usize>(value)?,
                    "rf_min_leaf" => exp.forest.min_leaf = parse_one(value)?,
                    "rf_max_features" => exp.forest.max_features = parse_optional::<usize>(value)?,
                    "rf_bootstrap" => exp.forest.bootstrap = parse_one(value)?,
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            })();
            r.map_err(syntax)?;
        }

        let synthetic = synth_kind.is_some() || synth_n.is_some() || synth_seed.is_some();
        exp.data = match (data_path, synthetic) {
            (Some(_), true) => {
                return Err(ConfigError::Invalid("give either `data` or `synth_*` keys, not both".into()));
            }
            (Some(path), false) => DataSource::Csv { path },
            (None, _) => DataSource::Synthetic {
                kind: synth_kind.unwrap_or_else(|| SynthKind::SineTrend.id().into()),
                n: synth_n.unwrap_or(1000),
                seed: synth_seed.unwrap_or(0),
            },
        };
        if parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        exp.validate()?;
        Ok(Self {
            experiment: exp,
            output_dir,
            parallelism,
        })
    }
}
