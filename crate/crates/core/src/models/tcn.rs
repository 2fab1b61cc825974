use rand_chacha::ChaCha8Rng;

use super::layers::{Forward, Linear};
use super::params::{ParamId, ParamStore};
use super::{ModelConfig, ModelError};
use crate::tape::Var;

type Result<T> = std::result::Result<T, ModelError>;

/// Dilated causal convolution over `[B, L, C_in]` (channels last). Output at
/// step `t` sees inputs `t - j·dilation` for `j < kernel`, zero-padded on the
/// left.
#[derive(Clone, Debug)]
struct CausalConv {
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
    dilation: usize,
}

impl CausalConv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            weight: store.glorot(format!("{name}.weight"), kernel * c_in, c_out, rng),
            bias: store.filled(format!("{name}.bias"), vec![c_out], 0.0),
            kernel,
            dilation,
        }
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        // Tap j is the input delayed by (kernel - 1 - j) * dilation steps.
        let taps = (0..self.kernel)
            .map(|j| Ok(f.tape.shift(x, 1, (self.kernel - 1 - j) * self.dilation)?))
            .collect::<Result<Vec<_>>>()?;
        let stacked = if taps.len() == 1 { taps[0] } else { f.tape.concat(&taps, 2)? };
        let y = f.tape.matmul(stacked, f.param(self.weight))?;
        Ok(f.tape.add(y, f.param(self.bias))?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: CausalConv,
    conv2: CausalConv,
    downsample: Option<Linear>,
}

impl Block {
    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.conv1.forward(f, x)?;
        let h = f.tape.relu(h);
        let h = f.dropout(h)?;
        let h = self.conv2.forward(f, h)?;
        let h = f.tape.relu(h);
        let h = f.dropout(h)?;
        let skip = match &self.downsample {
            Some(lin) => lin.forward(f, x)?,
            None => x,
        };
        let sum = f.tape.add(h, skip)?;
        Ok(f.tape.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub(super) struct Tcn {
    blocks: Vec<Block>,
    head: Linear,
}

impl Tcn {
    pub(super) fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let ch = cfg.d_model;
        let k = cfg.tcn_kernel;
        let blocks = (0..cfg.tcn_blocks)
            .map(|b| {
                let c_in = if b == 0 { 1 } else { ch };
                let dilation = 1 << b;
                Block {
                    conv1: CausalConv::new(store, &format!("tcn.{b}.conv1"), c_in, ch, k, dilation, rng),
                    conv2: CausalConv::new(store, &format!("tcn.{b}.conv2"), ch, ch, k, dilation, rng),
                    downsample: (c_in != ch).then(|| Linear::new(store, &format!("tcn.{b}.downsample"), c_in, ch, rng)),
                }
            })
            .collect();
        Self {
            blocks,
            head: Linear::new(store, "head", ch, cfg.horizon, rng),
        }
    }

    pub(super) fn forward(&self, cfg: &ModelConfig, f: &mut Forward, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(f, h)?;
        }
        let batch = f.tape.shape(x)[0];
        let last = f.tape.narrow(h, 1, cfg.window - 1, 1)?;
        let last = f.tape.reshape(last, &[batch, cfg.d_model])?;
        self.head.forward(f, last)
    }
}
