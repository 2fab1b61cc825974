//! Mini-batch Adam on mean squared error with early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::WindowedDataset;
use crate::models::{Forward, ModelError, NeuralModel};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is {got}; model expects window {window}, horizon {horizon}")]
    Shape { window: usize, horizon: usize, got: String },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (parameter norm {param_norm})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
        param_norm: f64,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub gradient_clip_norm: f64,
    /// Chronological tail of the training windows held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 200,
            early_stop_patience: 20,
            seed: 0,
            gradient_clip_norm: 1.0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("gradient_clip_norm", self.gradient_clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(TrainError::Config(
                "batch_size, max_epochs and early_stop_patience must be positive".into(),
            ));
        }
        if self.early_stop_patience > self.max_epochs {
            return Err(TrainError::Config(format!(
                "early_stop_patience {} exceeds max_epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean mini-batch loss with dropout active.
    pub train_loss: f64,
    /// Inference-mode MSE on the validation tail (train rows if there is none).
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: NeuralModel,
    pub curve: Vec<EpochLog>,
    pub best_epoch: usize,
}

// Fewer rows than this and the whole set is used for both fitting and
// model selection.
const MIN_VALIDATION_ROWS: usize = 2;

/// Steps an Adam optimizer over a fixed dataset one epoch at a time.
pub struct Trainer {
    model: NeuralModel,
    cfg: TrainConfig,
    fit: WindowedDataset,
    val: Option<WindowedDataset>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: NeuralModel, data: &WindowedDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        if data.w != mc.window || data.h != mc.horizon || data.is_empty() {
            return Err(TrainError::Shape {
                window: mc.window,
                horizon: mc.horizon,
                got: format!("{} rows of w={}, h={}", data.len(), data.w, data.h),
            });
        }
        let n = data.len();
        let n_val = (cfg.validation_fraction * n as f64).ceil() as usize;
        let (fit, val) = if n_val >= MIN_VALIDATION_ROWS && n - n_val >= 1 {
            (data.rows(0..n - n_val), Some(data.rows(n - n_val..n)))
        } else {
            (data.clone(), None)
        };
        let zeros: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            fit,
            val,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &NeuralModel {
        &self.model
    }

    pub fn into_model(self) -> NeuralModel {
        self.model
    }

    /// Rows used for gradient steps.
    pub fn fit_rows(&self) -> &WindowedDataset {
        &self.fit
    }

    /// One pass over shuffled mini-batches; returns the mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.fit.len()).collect();
        order.shuffle(&mut self.rng);
        let (w, h) = (self.fit.w, self.fit.h);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut x = Vec::with_capacity(idx.len() * w);
            let mut y = Vec::with_capacity(idx.len() * h);
            for &i in idx {
                x.extend_from_slice(self.fit.input(i));
                y.extend_from_slice(self.fit.target(i));
            }
            let loss = self.step(&x, &y)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: self.epoch,
                    batch: b,
                    loss,
                    param_norm: self.model.params().l2_norm(),
                });
            }
            total += loss;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }

    fn step(&mut self, x: &[f64], y: &[f64]) -> Result<f64> {
        let batch = self.model.prepare(x)?;
        let h = self.model.config().horizon;
        let rows = batch.anchors.len();
        let target = self.model.encode_targets(y, &batch.anchors);

        let mut tape = Tape::new();
        let params = self.model.params().bind(&mut tape);
        let input = tape.constant(batch.inputs);
        let target = tape.constant(Tensor::from_parts(vec![rows, h], target));
        let dropout = self.model.config().dropout;
        let pred = {
            let mut f = Forward {
                tape: &mut tape,
                params: &params,
                dropout,
                rng: Some(&mut self.rng),
            };
            self.model.forward(&mut f, input)?
        };
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq);
        let scale = self.model.config().input_scale;
        // Reported in normalized units; the optimizer sees the scaled loss.
        let loss_value = tape.value(loss).data()[0] / (scale * scale);
        if !loss_value.is_finite() {
            return Ok(loss_value);
        }
        tape.backward(loss)?;

        let grads: Vec<&[f64]> = params.iter().map(|&p| tape.grad(p).expect("parameters track gradients")).collect();
        let norm = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
        let clip = if norm > self.cfg.gradient_clip_norm {
            self.cfg.gradient_clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.adam_beta1.powi(self.step);
        let bc2 = 1.0 - c.adam_beta2.powi(self.step);
        for (k, param) in self.model.params_mut().tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let g = grads[k][j] * clip;
                m[j] = c.adam_beta1 * m[j] + (1.0 - c.adam_beta1) * g;
                v[j] = c.adam_beta2 * v[j] + (1.0 - c.adam_beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= c.learning_rate * mhat / (vhat.sqrt() + c.adam_eps);
            }
        }
        Ok(loss_value)
    }

    /// Inference-mode MSE over the validation tail, or the fitting rows when
    /// there is no tail.
    pub fn validation_mse(&self) -> Result<f64> {
        dataset_mse(&self.model, self.val.as_ref().unwrap_or(&self.fit))
    }
}

/// Inference-mode MSE of `model` over every target of `data`.
pub fn dataset_mse(model: &NeuralModel, data: &WindowedDataset) -> Result<f64> {
    let preds = model.predict_batch(&data.inputs)?;
    let flat: Vec<f64> = preds.into_iter().flatten().collect();
    let n = flat.len() as f64;
    Ok(flat.iter().zip(&data.targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Trains with early stopping and returns the best-validation parameters.
pub fn train(model: NeuralModel, data: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, data, cfg.clone())?;
    let mut best = (f64::INFINITY, 0, trainer.model().clone());
    let mut curve = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let train_loss = trainer.run_epoch()?;
        let val_loss = trainer.validation_mse()?;
        curve.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, trainer.model().clone());
        } else if epoch - best.1 >= cfg.early_stop_patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.2,
        curve,
        best_epoch: best.1,
    })
}
