use rand_chacha::ChaCha8Rng;

use super::layers::{positional_encoding, AttentionKind, DecoderLayer, EncoderLayer, Forward, Linear};
use super::params::{ParamId, ParamStore};
use super::{ModelConfig, ModelError, Pooling, Variant};
use crate::attention::{causal_mask, ProbSparseConfig};
use crate::tape::Var;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, ModelError>;

/// Scalar-to-vector input stage.
#[derive(Clone, Debug)]
enum Embed {
    Learned(Linear),
    /// Copies the scalar into every channel.
    Tiled,
}

#[derive(Clone, Debug)]
enum Head {
    /// Whole-sequence summary to `h` outputs.
    Pooled(Linear),
    /// One output per decoder position: `y_t = <state_t, w_t> + b_t`.
    PerPosition { weight: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
pub(super) struct Transformer {
    embed: Embed,
    dec_embed: Option<Embed>,
    positional: bool,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head: Head,
}

fn sparse_kind(cfg: &ModelConfig, layer: u64) -> AttentionKind {
    AttentionKind::ProbSparse(ProbSparseConfig {
        sample_factor: cfg.sample_factor,
        top_factor: cfg.top_factor,
        rng_seed: cfg.seed.wrapping_add(layer),
    })
}

impl Transformer {
    pub(super) fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let v = cfg.variant;
        let no_embed = v == Variant::VanillaNoEmbedding;
        let embed = if no_embed {
            Embed::Tiled
        } else {
            Embed::Learned(Linear::new(store, "embed", 1, d, rng))
        };
        let positional = !no_embed || cfg.no_embedding_keeps_pe;

        let n_enc = if v == Variant::DecoderOnly { 0 } else { cfg.n_encoder_layers };
        let encoder = (0..n_enc)
            .map(|i| {
                let kind = if v == Variant::VanillaProbSparse {
                    sparse_kind(cfg, i as u64)
                } else {
                    AttentionKind::Full
                };
                EncoderLayer::new(store, &format!("encoder.{i}"), d, cfg.n_heads, cfg.ffn_dim, kind, rng)
            })
            .collect();

        let n_dec = if v == Variant::EncoderOnly { 0 } else { cfg.n_decoder_layers };
        let cross = v != Variant::DecoderOnly;
        let decoder = (0..n_dec)
            .map(|i| {
                let kind = if v == Variant::VanillaProbSparse && cfg.sparse_decoder {
                    sparse_kind(cfg, (n_enc + i) as u64)
                } else {
                    AttentionKind::Full
                };
                DecoderLayer::new(store, &format!("decoder.{i}"), d, cfg.n_heads, cfg.ffn_dim, cross, kind, rng)
            })
            .collect();

        let dec_embed = match v {
            Variant::EncoderOnly | Variant::DecoderOnly => None,
            Variant::VanillaNoEmbedding => Some(Embed::Tiled),
            _ => Some(Embed::Learned(Linear::new(store, "dec_embed", 1, d, rng))),
        };

        let head = if dec_embed.is_some() {
            Head::PerPosition {
                weight: store.glorot_shaped("head.weight", vec![cfg.horizon, d], d, 1, rng),
                bias: store.filled("head.bias", vec![cfg.horizon], 0.0),
            }
        } else {
            Head::Pooled(Linear::new(store, "head", d, cfg.horizon, rng))
        };

        Self {
            embed,
            dec_embed,
            positional,
            encoder,
            decoder,
            head,
        }
    }

    // [B, L, 1] -> [B, L, d], plus positional encoding when enabled.
    fn embed_seq(&self, embed: &Embed, cfg: &ModelConfig, f: &mut Forward, x: Var) -> Result<Var> {
        let d = cfg.d_model;
        let len = f.tape.shape(x)[1];
        let e = match embed {
            Embed::Learned(lin) => lin.forward(f, x)?,
            Embed::Tiled => {
                let ones = f.tape.constant(Tensor::full(vec![1, d], 1.0));
                f.tape.matmul(x, ones)?
            }
        };
        let e = if self.positional {
            // d_model parity is checked by config validation.
            let pe = positional_encoding(len, d).expect("even d_model");
            let pe = f.tape.constant(pe);
            f.tape.add(e, pe)?
        } else {
            e
        };
        f.dropout(e)
    }

    fn encode(&self, cfg: &ModelConfig, f: &mut Forward, x: Var) -> Result<Var> {
        let mut hcur = self.embed_seq(&self.embed, cfg, f, x)?;
        for layer in &self.encoder {
            hcur = layer.forward(f, hcur)?;
        }
        Ok(hcur)
    }

    pub(super) fn decoder_only_states(&self, cfg: &ModelConfig, f: &mut Forward, x: Var) -> Result<Var> {
        if cfg.variant != Variant::DecoderOnly {
            return Err(ModelError::Config(format!("{} is not decoder-only", cfg.variant)));
        }
        let mask = causal_mask(cfg.window);
        let mut hcur = self.embed_seq(&self.embed, cfg, f, x)?;
        for layer in &self.decoder {
            hcur = layer.forward(f, hcur, None, &mask)?;
        }
        Ok(hcur)
    }

    fn last_position(f: &mut Forward, x: Var) -> Result<Var> {
        let s = f.tape.shape(x).to_vec();
        let last = f.tape.narrow(x, 1, s[1] - 1, 1)?;
        Ok(f.tape.reshape(last, &[s[0], s[2]])?)
    }

    pub(super) fn forward(&self, cfg: &ModelConfig, f: &mut Forward, x: Var) -> Result<Var> {
        let summary = match cfg.variant {
            Variant::EncoderOnly => {
                let enc = self.encode(cfg, f, x)?;
                match cfg.pooling {
                    Pooling::Mean => f.tape.mean_axis(enc, 1)?,
                    Pooling::Last => Self::last_position(f, enc)?,
                }
            }
            Variant::DecoderOnly => {
                let states = self.decoder_only_states(cfg, f, x)?;
                Self::last_position(f, states)?
            }
            _ => return self.forward_seq2seq(cfg, f, x),
        };
        match &self.head {
            Head::Pooled(lin) => lin.forward(f, summary),
            Head::PerPosition { .. } => unreachable!("pooled models use a pooled head"),
        }
    }

    fn forward_seq2seq(&self, cfg: &ModelConfig, f: &mut Forward, x: Var) -> Result<Var> {
        let memory = self.encode(cfg, f, x)?;
        let batch = f.tape.shape(x)[0];
        let last = f.tape.narrow(x, 1, cfg.window - 1, 1)?;
        let copies = vec![last; cfg.horizon];
        let dec_in = f.tape.concat(&copies, 1)?;
        let embed = self.dec_embed.as_ref().expect("seq2seq model has a decoder embedding");
        let mut y = self.embed_seq(embed, cfg, f, dec_in)?;
        let mask = causal_mask(cfg.horizon);
        for layer in &self.decoder {
            y = layer.forward(f, y, Some(memory), &mask)?;
        }
        let Head::PerPosition { weight, bias } = &self.head else {
            unreachable!("seq2seq models use a per-position head");
        };
        let weighted = f.tape.mul(y, f.param(*weight))?;
        let summed = f.tape.sum_axis(weighted, 2)?;
        debug_assert_eq!(f.tape.shape(summed), &[batch, cfg.horizon]);
        Ok(f.tape.add(summed, f.param(*bias))?)
    }
}
