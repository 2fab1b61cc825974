//! Scaled dot-product attention kernels.
//!
//! The kernels here take already-projected `Q`, `K`, `V` of shape
//! `[B, L, d_model]` (or `[L, d_model]`), split them into heads, and return the
//! concatenated per-head outputs *before* the output projection. The
//! projections themselves live in [`crate::models::layers`].
//!
//! ProbSparse attention scores every query by how peaked its attention
//! distribution is, estimated from a random subset of keys as
//! `max(scores) - mean(scores)`. The `u` highest-scoring queries get ordinary
//! softmax attention over all keys; every other query passes its own value
//! row through unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("d_model {d_model} is not divisible by {n_heads} heads")]
    HeadsDoNotDivide { d_model: usize, n_heads: usize },
    #[error("query/key/value shapes disagree: q {q:?}, k {k:?}, v {v:?}")]
    Shapes {
        q: Vec<usize>,
        k: Vec<usize>,
        v: Vec<usize>,
    },
    #[error("mask is {mask_q}x{mask_k} but attention is {l_q}x{l_k}")]
    MaskShape {
        mask_q: usize,
        mask_k: usize,
        l_q: usize,
        l_k: usize,
    },
    #[error("query row {row} has no allowed key")]
    DegenerateMask { row: usize },
    #[error("ProbSparse pass-through needs self-attention, got L_q={l_q}, L_k={l_k}")]
    NotSelfAttention { l_q: usize, l_k: usize },
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Boolean attention mask, `true` meaning the query may attend to the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    l_q: usize,
    l_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(l_q: usize, l_k: usize, allowed: Vec<bool>) -> Option<Self> {
        (allowed.len() == l_q * l_k).then_some(Self { l_q, l_k, allowed })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.l_q, self.l_k)
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.l_k + j]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// First query row with nothing to attend to.
    pub fn degenerate_row(&self) -> Option<usize> {
        (0..self.l_q).find(|&i| (0..self.l_k).all(|j| !self.is_allowed(i, j)))
    }

    /// `0` where allowed, `-inf` elsewhere, shaped `[L_q, L_k]`.
    pub fn additive(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::from_parts(vec![self.l_q, self.l_k], data)
    }
}

/// Lower-triangular mask: position `i` sees positions `0..=i`.
pub fn causal_mask(len: usize) -> AttentionMask {
    let allowed = (0..len).flat_map(|i| (0..len).map(move |j| j <= i)).collect();
    AttentionMask {
        l_q: len,
        l_k: len,
        allowed,
    }
}

/// Sampling and selection sizes for ProbSparse attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbSparseConfig {
    /// `c` in `ceil(c * ln L_k)` sampled keys.
    pub sample_factor: f64,
    /// `c'` in `ceil(c' * ln L_q)` selected queries.
    pub top_factor: f64,
    pub rng_seed: u64,
}

impl Default for ProbSparseConfig {
    fn default() -> Self {
        Self {
            sample_factor: 5.0,
            top_factor: 5.0,
            rng_seed: 0,
        }
    }
}

fn log_count(factor: f64, len: usize) -> usize {
    let raw = (factor * (len as f64).ln()).ceil();
    (raw.max(1.0) as usize).min(len)
}

impl ProbSparseConfig {
    pub fn sampled_keys(&self, l_k: usize) -> usize {
        log_count(self.sample_factor, l_k)
    }

    pub fn top_u(&self, l_q: usize) -> usize {
        log_count(self.top_factor, l_q)
    }

    /// Sorted key indices sampled without replacement for one head. The draw
    /// does not depend on the batch position, so a window gets the same
    /// output alone or inside a batch.
    pub fn sample_key_indices(&self, head: usize, l_k: usize) -> Vec<usize> {
        let n = self.sampled_keys(l_k);
        let stream = head as u64 + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut idx = rand::seq::index::sample(&mut rng, l_k, n).into_vec();
        idx.sort_unstable();
        idx
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln Σ_j exp(s_j) - mean_j s_j` with `s_j = q·k_j / sqrt(d)`; `keys` is a
/// row-major `[L, d]` matrix.
pub fn sparsity_measure_exact(q: &[f64], keys: &[f64]) -> f64 {
    let d = q.len();
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = keys.chunks(d).map(|k| dot(q, k) * scale).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - scores.iter().sum::<f64>() / scores.len() as f64
}

/// `max_j s_j - mean_j s_j` over the sampled keys only.
pub fn sparsity_measure_approx(q: &[f64], sampled_keys: &[f64]) -> f64 {
    let d = q.len();
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = sampled_keys.chunks(d).map(|k| dot(q, k) * scale).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max - scores.iter().sum::<f64>() / scores.len() as f64
}

/// Indices of the `u` largest scores, highest first; equal scores keep the
/// lower index first.
pub fn select_top_u(scores: &[f64], u: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(u);
    order
}

struct Heads {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    l_q: usize,
    l_k: usize,
    d_model: usize,
    n_heads: usize,
    unbatched: bool,
}

fn to_batched(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    Ok(match s.len() {
        2 => tape.reshape(x, &[1, s[0], s[1]])?,
        _ => x,
    })
}

// [B, L, d] -> [B, H, L, d/H]
fn split_heads(tape: &mut Tape, x: Var, n_heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], s[1], n_heads, s[2] / n_heads])?;
    Ok(tape.permute(r, &[0, 2, 1, 3])?)
}

// [B, H, L, dh] -> [B, L, H*dh]
fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(p, &[s[0], s[2], s[1] * s[3]])?)
}

fn prepare(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize, mask: Option<&AttentionMask>) -> Result<Heads> {
    let shapes = || AttentionError::Shapes {
        q: tape.shape(q).to_vec(),
        k: tape.shape(k).to_vec(),
        v: tape.shape(v).to_vec(),
    };
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    let rank_ok = matches!(sq.len(), 2 | 3) && sq.len() == sk.len() && sk == sv;
    if !rank_ok || sq[..sq.len() - 2] != sk[..sk.len() - 2] || sq.last() != sk.last() {
        return Err(shapes());
    }
    let unbatched = sq.len() == 2;
    let d_model = *sq.last().unwrap();
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(AttentionError::HeadsDoNotDivide { d_model, n_heads });
    }
    let (l_q, l_k) = (sq[sq.len() - 2], sk[sk.len() - 2]);
    if let Some(m) = mask {
        let (mq, mk) = m.dims();
        if (mq, mk) != (l_q, l_k) {
            return Err(AttentionError::MaskShape {
                mask_q: mq,
                mask_k: mk,
                l_q,
                l_k,
            });
        }
        if let Some(row) = m.degenerate_row() {
            return Err(AttentionError::DegenerateMask { row });
        }
    }
    let (q, k, v) = (to_batched(tape, q)?, to_batched(tape, k)?, to_batched(tape, v)?);
    let batch = tape.shape(q)[0];
    Ok(Heads {
        q: split_heads(tape, q, n_heads)?,
        k: split_heads(tape, k, n_heads)?,
        v: split_heads(tape, v, n_heads)?,
        batch,
        l_q,
        l_k,
        d_model,
        n_heads,
        unbatched,
    })
}

// softmax(Q K^T / sqrt(d) + mask) V per head, [B, H, L_q, dh].
fn attend(tape: &mut Tape, h: &Heads, mask: Option<&AttentionMask>) -> Result<Var> {
    let dh = h.d_model / h.n_heads;
    let kt = tape.transpose(h.k)?;
    let raw = tape.matmul(h.q, kt)?;
    let mut scores = tape.scale(raw, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        let add = tape.constant(m.additive());
        scores = tape.add(scores, add)?;
    }
    let weights = tape.softmax(scores)?;
    Ok(tape.matmul(weights, h.v)?)
}

fn finish(tape: &mut Tape, h: &Heads, per_head: Var) -> Result<Var> {
    let merged = merge_heads(tape, per_head)?;
    Ok(if h.unbatched {
        tape.reshape(merged, &[h.l_q, h.d_model])?
    } else {
        merged
    })
}

/// Multi-head scaled dot-product attention, heads concatenated, no output
/// projection.
pub fn full_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let h = prepare(tape, q, k, v, n_heads, mask)?;
    let out = attend(tape, &h, mask)?;
    finish(tape, &h, out)
}

/// Which query rows get full attention, flattened over `[B, H, L_q]`.
pub fn probsparse_selection(
    tape: &Tape,
    q_heads: Var,
    k_heads: Var,
    mask: Option<&AttentionMask>,
    cfg: &ProbSparseConfig,
) -> Vec<bool> {
    let (qv, kv) = (tape.value(q_heads), tape.value(k_heads));
    let s = qv.shape();
    let (batch, heads, l_q, dh) = (s[0], s[1], s[2], s[3]);
    let l_k = kv.shape()[2];
    let u = cfg.top_u(l_q);
    let mut selected = vec![false; batch * heads * l_q];
    let samples: Vec<Vec<usize>> = (0..heads).map(|hd| cfg.sample_key_indices(hd, l_k)).collect();
    for b in 0..batch {
        for (hd, sample) in samples.iter().enumerate() {
            let base_q = (b * heads + hd) * l_q * dh;
            let base_k = (b * heads + hd) * l_k * dh;
            let scores: Vec<f64> = (0..l_q)
                .map(|i| {
                    let qi = &qv.data()[base_q + i * dh..base_q + (i + 1) * dh];
                    let keys: Vec<f64> = sample
                        .iter()
                        .filter(|&&j| mask.is_none_or(|m| m.is_allowed(i, j)))
                        .flat_map(|&j| kv.data()[base_k + j * dh..base_k + (j + 1) * dh].iter().copied())
                        .collect();
                    if keys.is_empty() {
                        f64::NEG_INFINITY
                    } else {
                        sparsity_measure_approx(qi, &keys)
                    }
                })
                .collect();
            for i in select_top_u(&scores, u) {
                selected[(b * heads + hd) * l_q + i] = true;
            }
        }
    }
    selected
}

/// ProbSparse self-attention. Selected queries get the same output as
/// [`full_attention`]; the rest output their own per-head value row.
///
/// Sampled-key scores under a mask only consider keys the query may see.
pub fn probsparse_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: Option<&AttentionMask>,
    cfg: &ProbSparseConfig,
) -> Result<Var> {
    let h = prepare(tape, q, k, v, n_heads, mask)?;
    if h.l_q != h.l_k {
        return Err(AttentionError::NotSelfAttention { l_q: h.l_q, l_k: h.l_k });
    }
    let rows = probsparse_selection(tape, h.q, h.k, mask, cfg);
    let full = attend(tape, &h, mask)?;
    let dh = h.d_model / h.n_heads;
    let elem_mask: Vec<bool> = rows.iter().flat_map(|&r| std::iter::repeat_n(r, dh)).collect();
    debug_assert_eq!(elem_mask.len(), h.batch * h.n_heads * h.l_q * dh);
    let out = tape.select(&elem_mask, full, h.v)?;
    finish(tape, &h, out)
}
