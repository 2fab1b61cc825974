//! Binary checkpoints for fitted models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TSBCKPT\0"
//! version    u32      currently 1
//! header     u32 length, then UTF-8 JSON (cell, normalizer, kind, model config)
//! arrays     u32 count, then per array:
//!              u32 name length, name bytes (UTF-8)
//!              u32 rank, rank × u64 dims
//!              prod(dims) × f64
//! ```
//!
//! Neural models store one array per parameter, named as in the model's
//! parameter store. An SVR step `s` stores `svr.s.support_vectors`
//! `[n_sv, w]`, `svr.s.dual_coefficients`, `svr.s.support_indices` and
//! `svr.s.scalars` (bias, gamma, C, epsilon, violation, iterations). A forest
//! step stores each tree as `rf.s.tree.t` `[nodes, 5]` with rows
//! `(is_split, value | feature, samples | threshold, left, right)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CellKey, TrainedModel};
use crate::classical::forest::{Node, Tree};
use crate::classical::{ClassicalModel, ForestModel, SvrModel};
use crate::data::Normalizer;
use crate::models::{ModelConfig, NeuralModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TSBCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

/// A named array; unlike [`Tensor`], dimensions may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Neural,
    Svr,
    Forest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    cell: CellKey,
    norm_min: f64,
    norm_max: f64,
    kind: Kind,
    steps: usize,
    width: usize,
    model_config: Option<ModelConfig>,
}

/// A fitted cell: the model plus the normalizer it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cell: CellKey,
    pub norm: Normalizer,
    pub model: TrainedModel,
}

impl Checkpoint {
    fn arrays(&self) -> (Header, Vec<NamedArray>) {
        let mut arrays = Vec::new();
        let (kind, steps, width, model_config) = match &self.model {
            TrainedModel::Neural(m) => {
                for (name, t) in m.params().iter() {
                    arrays.push(NamedArray::new(name, t.shape().to_vec(), t.data().to_vec()));
                }
                let c = m.config().clone();
                (Kind::Neural, c.horizon, c.window, Some(c))
            }
            TrainedModel::Classical(ClassicalModel::Svr(steps)) => {
                for (s, m) in steps.iter().enumerate() {
                    let n_sv = m.dual_coefficients.len();
                    arrays.push(NamedArray::new(
                        format!("svr.{s}.support_vectors"),
                        vec![n_sv, m.width],
                        m.support_vectors.clone(),
                    ));
                    arrays.push(NamedArray::new(
                        format!("svr.{s}.dual_coefficients"),
                        vec![n_sv],
                        m.dual_coefficients.clone(),
                    ));
                    arrays.push(NamedArray::new(
                        format!("svr.{s}.support_indices"),
                        vec![n_sv],
                        m.support_indices.iter().map(|&i| i as f64).collect(),
                    ));
                    arrays.push(NamedArray::new(
                        format!("svr.{s}.scalars"),
                        vec![6],
                        vec![m.bias, m.gamma, m.c, m.epsilon, m.violation, m.iterations as f64],
                    ));
                }
                (Kind::Svr, steps.len(), steps.first().map_or(0, |m| m.width), None)
            }
            TrainedModel::Classical(ClassicalModel::Forest(steps)) => {
                for (s, f) in steps.iter().enumerate() {
                    for (t, tree) in f.trees.iter().enumerate() {
                        let mut data = Vec::with_capacity(tree.nodes.len() * 5);
                        for node in &tree.nodes {
                            data.extend(match *node {
                                Node::Leaf { value, samples } => [0.0, value, samples as f64, 0.0, 0.0],
                                Node::Split {
                                    feature,
                                    threshold,
                                    left,
                                    right,
                                } => [1.0, feature as f64, threshold, left as f64, right as f64],
                            });
                        }
                        arrays.push(NamedArray::new(format!("rf.{s}.tree.{t}"), vec![tree.nodes.len(), 5], data));
                    }
                }
                (Kind::Forest, steps.len(), steps.first().map_or(0, |m| m.width), None)
            }
        };
        let header = Header {
            cell: self.cell,
            norm_min: self.norm.min,
            norm_max: self.norm.max,
            kind,
            steps,
            width,
            model_config,
        };
        (header, arrays)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (header, arrays) = self.arrays();
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in &arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| malformed(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| malformed(e.to_string()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| malformed(format!("{name}: shape overflows")))?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            arrays.push(NamedArray { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(malformed(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let norm = Normalizer {
            min: header.norm_min,
            max: header.norm_max,
        };
        let model = rebuild(&header, arrays)?;
        Ok(Self {
            cell: header.cell,
            norm,
            model,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial
    /// checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| CheckpointError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn as_index(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15 {
        Ok(v as usize)
    } else {
        Err(malformed(format!("{what}: {v} is not an index")))
    }
}

fn rebuild(header: &Header, arrays: Vec<NamedArray>) -> Result<TrainedModel> {
    let mut by_name: std::collections::HashMap<String, NamedArray> =
        arrays.iter().map(|a| (a.name.clone(), a.clone())).collect();
    let mut take = |name: String, shape: Option<&[usize]>| -> Result<NamedArray> {
        let a = by_name.remove(&name).ok_or_else(|| malformed(format!("missing array {name}")))?;
        if let Some(s) = shape {
            if a.shape != s {
                return Err(malformed(format!("{name}: shape {:?}, expected {s:?}", a.shape)));
            }
        }
        Ok(a)
    };
    let model = match header.kind {
        Kind::Neural => {
            let config = header.model_config.clone().ok_or_else(|| malformed("neural checkpoint without config"))?;
            let tensors = arrays
                .into_iter()
                .map(|a| {
                    let t = Tensor::new(a.shape, a.data).map_err(|e| malformed(format!("{}: {e}", a.name)))?;
                    Ok((a.name, t))
                })
                .collect::<Result<Vec<_>>>()?;
            let m = NeuralModel::from_parts(config, tensors).map_err(|e| malformed(e.to_string()))?;
            return Ok(TrainedModel::Neural(m));
        }
        Kind::Svr => {
            let w = header.width;
            let steps = (0..header.steps)
                .map(|s| {
                    let coef = take(format!("svr.{s}.dual_coefficients"), None)?;
                    let n_sv = coef.data.len();
                    let sv = take(format!("svr.{s}.support_vectors"), Some(&[n_sv, w]))?;
                    let idx = take(format!("svr.{s}.support_indices"), Some(&[n_sv]))?;
                    let sc = take(format!("svr.{s}.scalars"), Some(&[6]))?;
                    Ok(SvrModel {
                        support_vectors: sv.data,
                        dual_coefficients: coef.data,
                        support_indices: idx
                            .data
                            .iter()
                            .map(|&v| as_index(v, "support index"))
                            .collect::<Result<_>>()?,
                        bias: sc.data[0],
                        gamma: sc.data[1],
                        c: sc.data[2],
                        epsilon: sc.data[3],
                        width: w,
                        violation: sc.data[4],
                        iterations: as_index(sc.data[5], "iterations")?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ClassicalModel::Svr(steps)
        }
        Kind::Forest => {
            let steps = (0..header.steps)
                .map(|s| {
                    let mut trees = Vec::new();
                    while let Ok(a) = take(format!("rf.{s}.tree.{}", trees.len()), None) {
                        trees.push(decode_tree(&a, header.width)?);
                    }
                    if trees.is_empty() {
                        return Err(malformed(format!("forest step {s} has no trees")));
                    }
                    Ok(ForestModel {
                        trees,
                        width: header.width,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ClassicalModel::Forest(steps)
        }
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(malformed(format!("unexpected array {extra}")));
    }
    Ok(TrainedModel::Classical(model))
}

fn decode_tree(a: &NamedArray, width: usize) -> Result<Tree> {
    if a.shape.len() != 2 || a.shape[1] != 5 || a.shape[0] == 0 {
        return Err(malformed(format!("{}: bad tree shape {:?}", a.name, a.shape)));
    }
    let n = a.shape[0];
    let nodes = a
        .data
        .chunks(5)
        .enumerate()
        .map(|(i, r)| {
            if r[0] == 0.0 {
                Ok(Node::Leaf {
                    value: r[1],
                    samples: as_index(r[2], "samples")?,
                })
            } else {
                let (feature, left, right) = (as_index(r[1], "feature")?, as_index(r[3], "left")?, as_index(r[4], "right")?);
                // Children always follow their parent, which rules out cycles.
                if feature >= width || left <= i || right <= i || left >= n || right >= n {
                    return Err(malformed(format!("{}: bad split node {i}", a.name)));
                }
                Ok(Node::Split {
                    feature,
                    threshold: r[2],
                    left,
                    right,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tree { nodes })
}
