//! Building blocks shared by the neural forecasters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::ModelError;
use crate::attention::{full_attention, probsparse_attention, AttentionMask, ProbSparseConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// State threaded through one forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a [Var],
    pub dropout: f64,
    /// Present only while training; drives dropout masks.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Forward<'_> {
    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x).to_vec();
        let n = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let m = self.tape.constant(Tensor::from_parts(shape, mask));
        Ok(self.tape.mul(x, m)?)
    }
}

/// Sinusoidal position table `[len, d_model]`; `d_model` must be even.
pub fn positional_encoding(len: usize, d_model: usize) -> Option<Tensor> {
    if len == 0 || d_model == 0 || !d_model.is_multiple_of(2) {
        return None;
    }
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Some(Tensor::from_parts(vec![len, d_model], data))
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.glorot(format!("{name}.weight"), fan_in, fan_out, rng),
            b: store.filled(format!("{name}.bias"), vec![fan_out], 0.0),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, ModelError> {
        let y = f.tape.matmul(x, f.param(self.w))?;
        Ok(f.tape.add(y, f.param(self.b))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.filled(format!("{name}.gain"), vec![width], 1.0),
            bias: store.filled(format!("{name}.bias"), vec![width], 0.0),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, ModelError> {
        Ok(f.tape.layer_norm(x, f.param(self.gain), f.param(self.bias), LAYER_NORM_EPS)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionKind {
    Full,
    ProbSparse(ProbSparseConfig),
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    n_heads: usize,
    kind: AttentionKind,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        kind: AttentionKind,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng),
            n_heads,
            kind,
        }
    }

    pub fn forward(&self, f: &mut Forward, query: Var, memory: Var, mask: Option<&AttentionMask>) -> Result<Var, ModelError> {
        let q = self.q.forward(f, query)?;
        let k = self.k.forward(f, memory)?;
        let v = self.v.forward(f, memory)?;
        let heads = match &self.kind {
            AttentionKind::Full => full_attention(f.tape, q, k, v, self.n_heads, mask)?,
            AttentionKind::ProbSparse(cfg) => probsparse_attention(f.tape, q, k, v, self.n_heads, mask, cfg)?,
        };
        self.out.forward(f, heads)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d_model, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, ModelError> {
        let h = self.up.forward(f, x)?;
        let h = f.tape.relu(h);
        let h = f.dropout(h)?;
        self.down.forward(f, h)
    }
}

// x + dropout(sub(x)) followed by layer norm.
fn residual_norm(f: &mut Forward, x: Var, sub: Var, norm: &LayerNorm) -> Result<Var, ModelError> {
    let sub = f.dropout(sub)?;
    let sum = f.tape.add(x, sub)?;
    norm.forward(f, sum)
}

/// Post-norm encoder layer: self-attention then feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ff: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_dim: usize,
        kind: AttentionKind,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d_model, n_heads, kind, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, ffn_dim, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var, ModelError> {
        let a = self.attn.forward(f, x, x, None)?;
        let x = residual_norm(f, x, a, &self.norm1)?;
        let h = self.ff.forward(f, x)?;
        residual_norm(f, x, h, &self.norm2)
    }
}

/// Post-norm decoder layer: causal self-attention, optional cross-attention
/// over encoder memory, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm_self: LayerNorm,
    cross: Option<(MultiHeadAttention, LayerNorm)>,
    ff: FeedForward,
    norm_ff: LayerNorm,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_dim: usize,
        with_cross: bool,
        self_kind: AttentionKind,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let self_attn = MultiHeadAttention::new(store, &format!("{name}.self_attn"), d_model, n_heads, self_kind, rng);
        let norm_self = LayerNorm::new(store, &format!("{name}.norm_self"), d_model);
        let cross = with_cross.then(|| {
            (
                MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d_model, n_heads, AttentionKind::Full, rng),
                LayerNorm::new(store, &format!("{name}.norm_cross"), d_model),
            )
        });
        Self {
            self_attn,
            norm_self,
            cross,
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, ffn_dim, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d_model),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var, memory: Option<Var>, mask: &AttentionMask) -> Result<Var, ModelError> {
        let a = self.self_attn.forward(f, x, x, Some(mask))?;
        let mut x = residual_norm(f, x, a, &self.norm_self)?;
        if let (Some((attn, norm)), Some(mem)) = (&self.cross, memory) {
            let c = attn.forward(f, x, mem, None)?;
            x = residual_norm(f, x, c, norm)?;
        }
        let h = self.ff.forward(f, x)?;
        residual_norm(f, x, h, &self.norm_ff)
    }
}
