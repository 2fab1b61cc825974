use rand_chacha::ChaCha8Rng;

use super::layers::{Forward, Linear};
use super::params::{ParamId, ParamStore};
use super::{ModelConfig, ModelError};
use crate::tape::Var;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, ModelError>;

/// One LSTM layer. Gate blocks in the fused matrices are ordered
/// input, forget, candidate, output.
#[derive(Clone, Debug)]
struct Cell {
    w_in: ParamId,
    w_rec: ParamId,
    bias: ParamId,
    hidden: usize,
}

#[derive(Clone, Debug)]
pub(super) struct Lstm {
    cells: Vec<Cell>,
    head: Linear,
}

impl Lstm {
    pub(super) fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let hidden = cfg.d_model;
        let cells = (0..cfg.lstm_layers)
            .map(|l| {
                let input = if l == 0 { 1 } else { hidden };
                let w_in = store.glorot(format!("lstm.{l}.w_in"), input, 4 * hidden, rng);
                let w_rec = store.glorot(format!("lstm.{l}.w_rec"), hidden, 4 * hidden, rng);
                // Forget-gate bias starts at 1 so early training keeps memory.
                let mut b = vec![0.0; 4 * hidden];
                b[hidden..2 * hidden].fill(1.0);
                let bias = store.push(format!("lstm.{l}.bias"), Tensor::from_parts(vec![4 * hidden], b));
                Cell {
                    w_in,
                    w_rec,
                    bias,
                    hidden,
                }
            })
            .collect();
        Self {
            cells,
            head: Linear::new(store, "head", hidden, cfg.horizon, rng),
        }
    }

    pub(super) fn forward(&self, cfg: &ModelConfig, f: &mut Forward, x: Var) -> Result<Var> {
        let batch = f.tape.shape(x)[0];
        let mut seq: Vec<Var> = (0..cfg.window)
            .map(|t| {
                let step = f.tape.narrow(x, 1, t, 1)?;
                Ok(f.tape.reshape(step, &[batch, 1])?)
            })
            .collect::<Result<_>>()?;
        for (l, cell) in self.cells.iter().enumerate() {
            if l > 0 {
                seq = seq.into_iter().map(|s| f.dropout(s)).collect::<Result<_>>()?;
            }
            seq = cell.run(f, &seq, batch)?;
        }
        let last = *seq.last().expect("window is non-empty");
        let last = f.dropout(last)?;
        self.head.forward(f, last)
    }
}

impl Cell {
    fn run(&self, f: &mut Forward, inputs: &[Var], batch: usize) -> Result<Vec<Var>> {
        let hd = self.hidden;
        let mut h = f.tape.constant(Tensor::zeros(vec![batch, hd]));
        let mut c = f.tape.constant(Tensor::zeros(vec![batch, hd]));
        let (w_in, w_rec, bias) = (f.param(self.w_in), f.param(self.w_rec), f.param(self.bias));
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let zi = f.tape.matmul(x, w_in)?;
            let zh = f.tape.matmul(h, w_rec)?;
            let z = f.tape.add(zi, zh)?;
            let z = f.tape.add(z, bias)?;
            let gate = |f: &mut Forward, k: usize| f.tape.narrow(z, 1, k * hd, hd);
            let (i, fg, g, o) = (gate(f, 0)?, gate(f, 1)?, gate(f, 2)?, gate(f, 3)?);
            let i = f.tape.sigmoid(i);
            let fg = f.tape.sigmoid(fg);
            let g = f.tape.tanh(g);
            let o = f.tape.sigmoid(o);
            let keep = f.tape.mul(fg, c)?;
            let write = f.tape.mul(i, g)?;
            c = f.tape.add(keep, write)?;
            let tc = f.tape.tanh(c);
            h = f.tape.mul(o, tc)?;
            out.push(h);
        }
        Ok(out)
    }
}
