//! Neural forecasters: five Transformer variants, an LSTM and a TCN, all
//! mapping a normalized window of `w` closes to `h` future values.

pub mod layers;
mod lstm;
pub mod params;
mod tcn;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionError;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub use layers::{positional_encoding, Forward};
pub use params::{ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("window has {got} values, model expects {expected}")]
    WindowLength { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EncoderOnly,
    DecoderOnly,
    Vanilla,
    VanillaNoEmbedding,
    VanillaProbSparse,
    Lstm,
    Tcn,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::EncoderOnly,
        Variant::DecoderOnly,
        Variant::Vanilla,
        Variant::VanillaNoEmbedding,
        Variant::VanillaProbSparse,
        Variant::Lstm,
        Variant::Tcn,
    ];

    /// Short identifier used in configs, file names and tables.
    pub fn id(self) -> &'static str {
        match self {
            Variant::EncoderOnly => "encoder_only",
            Variant::DecoderOnly => "decoder_only",
            Variant::Vanilla => "vanilla",
            Variant::VanillaNoEmbedding => "no_embedding",
            Variant::VanillaProbSparse => "probsparse",
            Variant::Lstm => "lstm",
            Variant::Tcn => "tcn",
        }
    }

    pub fn is_transformer(self) -> bool {
        !matches!(self, Variant::Lstm | Variant::Tcn)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown model variant `{s}`")))
    }
}

/// How the encoder-only model reduces its sequence to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub horizon: usize,
    pub window: usize,
    pub seed: u64,
    pub pooling: Pooling,
    /// Keep positional encodings in the no-embedding variant.
    pub no_embedding_keeps_pe: bool,
    /// Also sparsify decoder self-attention in the ProbSparse variant.
    pub sparse_decoder: bool,
    /// Sparsity sampling factors for the ProbSparse variant.
    pub sample_factor: f64,
    pub top_factor: f64,
    /// Subtract each window's last value from inputs and targets and add it
    /// back to predictions, so the network learns increments.
    pub anchor_last: bool,
    /// Multiplies network inputs and targets (after anchoring); outputs are
    /// divided by it. Keeps day-to-day increments near unit scale.
    pub input_scale: f64,
    pub lstm_layers: usize,
    pub tcn_blocks: usize,
    pub tcn_kernel: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, window: usize, horizon: usize) -> Self {
        let d_model = 64;
        Self {
            variant,
            d_model,
            n_heads: 8,
            n_encoder_layers: 3,
            n_decoder_layers: 2,
            ffn_dim: 4 * d_model,
            dropout: 0.1,
            horizon,
            window,
            seed: 0,
            pooling: Pooling::Mean,
            no_embedding_keeps_pe: false,
            sparse_decoder: false,
            sample_factor: 5.0,
            top_factor: 5.0,
            anchor_last: true,
            input_scale: 10.0,
            lstm_layers: 2,
            tcn_blocks: 4,
            tcn_kernel: 3,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.window == 0 || self.horizon == 0 {
            return bad(format!("window {} and horizon {} must be positive", self.window, self.horizon));
        }
        if self.d_model == 0 || self.ffn_dim == 0 {
            return bad("d_model and ffn_dim must be positive".into());
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return bad(format!("input_scale must be positive, got {}", self.input_scale));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.variant {
            v if v.is_transformer() => {
                if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
                    return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
                }
                if !self.d_model.is_multiple_of(2) {
                    return bad("positional encoding needs an even d_model".into());
                }
                let needs_encoder = v != Variant::DecoderOnly;
                let needs_decoder = v != Variant::EncoderOnly;
                if (needs_encoder && self.n_encoder_layers == 0) || (needs_decoder && self.n_decoder_layers == 0) {
                    return bad(format!("{v} needs at least one layer of each stack it uses"));
                }
                if !(self.sample_factor > 0.0 && self.top_factor > 0.0) {
                    return bad("ProbSparse factors must be positive".into());
                }
            }
            Variant::Lstm if self.lstm_layers == 0 => return bad("lstm_layers must be positive".into()),
            Variant::Tcn if self.tcn_blocks == 0 || self.tcn_kernel == 0 => {
                return bad("tcn_blocks and tcn_kernel must be positive".into())
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Transformer(transformer::Transformer),
    Lstm(lstm::Lstm),
    Tcn(tcn::Tcn),
}

/// A neural forecaster: configuration, parameters and wiring.
#[derive(Clone, Debug)]
pub struct NeuralModel {
    config: ModelConfig,
    params: ParamStore,
    arch: Arch,
}

// The wiring is a function of the config, so equal configs and parameters
// mean equal models.
impl PartialEq for NeuralModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Windows prepared for the network: anchored, scaled inputs `[B, w, 1]` and
/// the per-row offsets to add back to outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub inputs: Tensor,
    pub anchors: Vec<f64>,
}

// Keeps inference tapes small.
const PREDICT_CHUNK: usize = 128;

impl NeuralModel {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let arch = match config.variant {
            Variant::Lstm => Arch::Lstm(lstm::Lstm::new(&config, &mut params, &mut rng)),
            Variant::Tcn => Arch::Tcn(tcn::Tcn::new(&config, &mut params, &mut rng)),
            _ => Arch::Transformer(transformer::Transformer::new(&config, &mut params, &mut rng)),
        };
        Ok(Self { config, params, arch })
    }

    /// Rebuilds the architecture and installs saved parameter values.
    pub fn from_parts(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::build(config)?;
        if tensors.len() != model.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let expected = model.params.names()[i].clone();
            let slot = &mut model.params.tensors_mut()[i];
            if name != expected || t.shape() != slot.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {i}: expected {expected} {:?}, got {name} {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Validates and anchors a row-major `[B, w]` block of windows.
    pub fn prepare(&self, windows: &[f64]) -> Result<PreparedBatch> {
        let w = self.config.window;
        if windows.is_empty() || !windows.len().is_multiple_of(w) {
            return Err(ModelError::WindowLength {
                expected: w,
                got: windows.len(),
            });
        }
        let rows = windows.len() / w;
        let mut data = windows.to_vec();
        let mut anchors = vec![0.0; rows];
        let scale = self.config.input_scale;
        for (row, a) in data.chunks_mut(w).zip(&mut anchors) {
            if self.config.anchor_last {
                *a = row[w - 1];
            }
            row.iter_mut().for_each(|x| *x = (*x - *a) * scale);
        }
        Ok(PreparedBatch {
            inputs: Tensor::from_parts(vec![rows, w, 1], data),
            anchors,
        })
    }

    /// Maps raw targets to the network's output space.
    pub fn encode_targets(&self, targets: &[f64], anchors: &[f64]) -> Vec<f64> {
        let scale = self.config.input_scale;
        targets
            .chunks(self.config.horizon)
            .zip(anchors)
            .flat_map(|(row, a)| row.iter().map(move |v| (v - a) * scale))
            .collect()
    }

    /// Network output `[B, h]` for prepared inputs `[B, w, 1]`.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        match &self.arch {
            Arch::Transformer(t) => t.forward(&self.config, f, x),
            Arch::Lstm(l) => l.forward(&self.config, f, x),
            Arch::Tcn(t) => t.forward(&self.config, f, x),
        }
    }

    /// Hidden states of the last decoder layer, `[B, L, d_model]`, for the
    /// decoder-only variant; used to check causality.
    pub fn decoder_states(&self, windows: &[f64]) -> Result<Tensor> {
        let Arch::Transformer(t) = &self.arch else {
            return Err(ModelError::Config(format!("{} has no decoder", self.config.variant)));
        };
        let batch = self.prepare(windows)?;
        let mut tape = Tape::new();
        let params = self.params.bind_frozen(&mut tape);
        let x = tape.constant(batch.inputs);
        let mut f = Forward {
            tape: &mut tape,
            params: &params,
            dropout: 0.0,
            rng: None,
        };
        let states = t.decoder_only_states(&self.config, &mut f, x)?;
        Ok(tape.value(states).clone())
    }

    /// Predicts `h` values for one normalized window.
    pub fn predict(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.config.window {
            return Err(ModelError::WindowLength {
                expected: self.config.window,
                got: window.len(),
            });
        }
        Ok(self.predict_batch(window)?.pop().unwrap_or_default())
    }

    /// Predicts every row of a row-major `[B, w]` block; returns `B` rows of `h`.
    pub fn predict_batch(&self, windows: &[f64]) -> Result<Vec<Vec<f64>>> {
        let w = self.config.window;
        let h = self.config.horizon;
        let mut out = Vec::with_capacity(windows.len() / w.max(1));
        for chunk in windows.chunks(PREDICT_CHUNK * w) {
            let batch = self.prepare(chunk)?;
            let mut tape = Tape::new();
            let params = self.params.bind_frozen(&mut tape);
            let x = tape.constant(batch.inputs);
            let mut f = Forward {
                tape: &mut tape,
                params: &params,
                dropout: 0.0,
                rng: None,
            };
            let y = self.forward(&mut f, x)?;
            let vals = tape.value(y).data();
            let scale = self.config.input_scale;
            for (row, a) in vals.chunks(h).zip(&batch.anchors) {
                out.push(row.iter().map(|v| a + v / scale).collect());
            }
        }
        Ok(out)
    }
}
