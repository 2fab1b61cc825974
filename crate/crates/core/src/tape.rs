//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! information to replay the chain rule. Nodes are only ever appended, so the
//! tape is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Binary elementwise ops broadcast the right operand over the leading
//! dimensions of the left one (the right shape must be a suffix of the left
//! shape). Matmul broadcasts leading batch dimensions numpy-style.

use crate::tensor::{split_at_suffix, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, Activation),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    SumAll(Var),
    SumAxis(Var, usize),
    Shift {
        x: Var,
        axis: usize,
        shift: usize,
    },
    Select {
        mask: Vec<bool>,
        on_true: Var,
        on_false: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Computation tape. Confined to one thread; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// c (+)= op(a) · op(b) with c: [m, n]. `a_t` means `a` is stored as [k, m].
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct BatchPlan {
    out_batch: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    b_shared: bool,
}

fn plan_batches(a_batch: &[usize], b_batch: &[usize]) -> Option<BatchPlan> {
    let nd = a_batch.len().max(b_batch.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; nd - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a_batch), pad(b_batch));
    let mut out = Vec::with_capacity(nd);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return None;
        }
    }
    let total: usize = out.iter().product();
    let b_shared = pb.iter().all(|&d| d == 1);
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let (mut ao, mut bo) = (0, 0);
        for d in 0..nd {
            ao = ao * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            bo = bo * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((ao, bo));
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(BatchPlan {
        out_batch: out,
        pairs,
        b_shared,
    })
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

// Gathers `src` into the axis order given by `perm`.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let nd = shape.len();
    if nd == 0 || src.is_empty() {
        return (out_shape, src.to_vec());
    }
    // Walk every output row (all axes but the last) and copy it with the
    // last axis's source stride.
    let (run, run_stride) = (out_shape[nd - 1], src_strides[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut off = 0usize;
    for _ in 0..src.len() / run {
        if run_stride == 1 {
            out.extend_from_slice(&src[off..off + run]);
        } else {
            out.extend((0..run).map(|j| src[off + j * run_stride]));
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= idx[d] * src_strides[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that takes part in gradient computation.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    /// `[.., m, k] x [.., k, n] -> [.., m, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let plan = plan_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(mismatch)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; plan.pairs.len() * m * n];
        if plan.b_shared && plan.pairs.iter().enumerate().all(|(i, p)| p.0 == i) {
            gemm(plan.pairs.len() * m, k, n, av, false, bv, false, &mut out, 0.0);
        } else {
            for (i, &(ao, bo)) in plan.pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &av[ao * m * k..],
                    false,
                    &bv[bo * k * n..],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = plan.out_batch;
        shape.extend([m, n]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(ta.shape(), tb.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bd = tb.data();
        let inner = bd.len();
        let data: Vec<f64> = ta
            .data()
            .chunks(inner)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data)).map(|t| {
            let op = match name {
                "add" => Op::Add(a, b),
                "sub" => Op::Sub(a, b),
                _ => Op::Mul(a, b),
            };
            self.push(t, op, &[a, b])
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let t = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Activation::Gelu => gelu,
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => sigmoid,
        };
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Unary(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// Softmax over the last dimension. `-inf` entries get exactly zero weight;
    /// a slice that is entirely `-inf` is an error.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let width = *t.shape().last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax",
            shape: vec![],
            reason: "needs at least one dimension".into(),
        })?;
        let mut out = Vec::with_capacity(t.numel());
        for (slice, row) in t.data().chunks(width).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateMask { slice });
            }
            let start = out.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - max).exp();
                sum += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= sum;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Layer normalization over the last dimension followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let width = *tx.shape().last().unwrap_or(&0);
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.numel() / width;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.ndim()];
        if perm.len() != t.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: t.shape().to_vec(),
                reason: format!("{perm:?} is not a permutation of the axes"),
            });
        }
        let (shape, data) = permute_data(t.data(), t.shape(), perm);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(a).to_vec(),
                reason: "needs two dimensions".into(),
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape: shape.to_vec(),
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::Narrow { x: a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?);
        let first = first.to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &x)| d != axis && x != first[d]) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "sum_axis",
                shape: shape.to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &t.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let dim = *self.shape(a).get(axis).unwrap_or(&1) as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / dim))
    }

    /// Delays `a` by `shift` steps along `axis`, filling the front with zeros.
    pub fn shift(&mut self, a: Var, axis: usize, shift: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "shift",
                shape: shape.to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut data = vec![0.0; t.numel()];
        if shift < dim {
            for o in 0..outer {
                let base = o * dim * inner;
                let n = (dim - shift) * inner;
                data[base + shift * inner..base + shift * inner + n].copy_from_slice(&t.data()[base..base + n]);
            }
        }
        let out = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(out, Op::Shift { x: a, axis, shift }, &[a]))
    }

    /// Elementwise choice: `mask[i] ? on_true[i] : on_false[i]`.
    pub fn select(&mut self, mask: &[bool], on_true: Var, on_false: Var) -> Result<Var> {
        let (tt, tf) = (self.value(on_true), self.value(on_false));
        if tt.shape() != tf.shape() || mask.len() != tt.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "select",
                lhs: tt.shape().to_vec(),
                rhs: tf.shape().to_vec(),
            });
        }
        let data = mask
            .iter()
            .zip(tt.data().iter().zip(tf.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let out = Tensor::from_parts(tt.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::Select {
                mask: mask.to_vec(),
                on_true,
                on_false,
            },
            &[on_true, on_false],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, adding into the stored gradient
    /// of every node that requires one. Calling it twice without
    /// [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulates `f(j)` into the gradient buffer of `v`.
        macro_rules! acc {
            ($v:expr, |$j:ident| $e:expr) => {{
                let v = $v;
                if needs(v) {
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
                    for ($j, slot) in buf.iter_mut().enumerate() {
                        *slot += $e;
                    }
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let plan = plan_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).expect("checked in forward");
                let flat = plan.b_shared && plan.pairs.iter().enumerate().all(|(i, p)| p.0 == i);
                if a == b {
                    // a·a: both halves land in the same buffer.
                    let mut da = vec![0.0; ta.numel()];
                    let mut db = vec![0.0; tb.numel()];
                    for (bi, &(ao, bo)) in plan.pairs.iter().enumerate() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        gemm(m, n, k, gc, false, &tb.data()[bo * k * n..], true, &mut da[ao * m * k..(ao + 1) * m * k], 1.0);
                        gemm(k, m, n, &ta.data()[ao * m * k..], true, gc, false, &mut db[bo * k * n..(bo + 1) * k * n], 1.0);
                    }
                    acc!(*a, |j| da[j] + db[j]);
                    return;
                }
                if needs(*a) {
                    let da = grads[a.0].get_or_insert_with(|| vec![0.0; ta.numel()]);
                    if flat {
                        gemm(plan.pairs.len() * m, n, k, g, false, tb.data(), true, da, 1.0);
                    } else {
                        for (bi, &(ao, bo)) in plan.pairs.iter().enumerate() {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..],
                                false,
                                &tb.data()[bo * k * n..],
                                true,
                                &mut da[ao * m * k..(ao + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                }
                if needs(*b) {
                    let db = grads[b.0].get_or_insert_with(|| vec![0.0; tb.numel()]);
                    if flat {
                        gemm(k, plan.pairs.len() * m, n, ta.data(), true, g, false, db, 1.0);
                    } else {
                        for (bi, &(ao, bo)) in plan.pairs.iter().enumerate() {
                            gemm(
                                k,
                                m,
                                n,
                                &ta.data()[ao * m * k..],
                                true,
                                &g[bi * m * n..],
                                false,
                                &mut db[bo * k * n..(bo + 1) * k * n],
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc!(*a, |j| g[j]);
                let inner = self.value(*b).numel();
                if needs(*b) {
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; inner]);
                    for chunk in g.chunks(inner) {
                        buf.iter_mut().zip(chunk).for_each(|(s, v)| *s += sign * v);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let inner = tb.len();
                acc!(*a, |j| g[j] * tb[j % inner]);
                if needs(*b) {
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; inner]);
                    for (chunk, xa) in g.chunks(inner).zip(ta.chunks(inner)) {
                        for j in 0..inner {
                            buf[j] += chunk[j] * xa[j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => acc!(*a, |j| g[j] * c),
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                match kind {
                    Activation::Relu => acc!(*a, |j| if x[j] > 0.0 { g[j] } else { 0.0 }),
                    Activation::Gelu => acc!(*a, |j| g[j] * gelu_grad(x[j])),
                    Activation::Tanh => acc!(*a, |j| g[j] * (1.0 - y[j] * y[j])),
                    Activation::Sigmoid => acc!(*a, |j| g[j] * y[j] * (1.0 - y[j])),
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap();
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; y.len()]);
                    for ((bs, ys), gs) in buf.chunks_mut(width).zip(y.chunks(width)).zip(g.chunks(width)) {
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            bs[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let width = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if needs(*x) {
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; xhat.len()]);
                    let nf = width as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let rg = &g[r * width..(r + 1) * width];
                        let rh = &xhat[r * width..(r + 1) * width];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..width {
                            let d = rg[j] * gv[j];
                            sum_d += d;
                            sum_dh += d * rh[j];
                        }
                        for j in 0..width {
                            let d = rg[j] * gv[j];
                            buf[r * width + j] += is / nf * (nf * d - sum_d - rh[j] * sum_dh);
                        }
                    }
                }
                if needs(*gain) {
                    let buf = grads[gain.0].get_or_insert_with(|| vec![0.0; width]);
                    for (rg, rh) in g.chunks(width).zip(xhat.chunks(width)) {
                        for j in 0..width {
                            buf[j] += rg[j] * rh[j];
                        }
                    }
                }
                if needs(*bias) {
                    let buf = grads[bias.0].get_or_insert_with(|| vec![0.0; width]);
                    for rg in g.chunks(width) {
                        buf.iter_mut().zip(rg).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::Reshape(a) => acc!(*a, |j| g[j]),
            Op::Permute(a, perm) => {
                if needs(*a) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (_, back) = permute_data(g, node.value.shape(), &inverse);
                    acc!(*a, |j| back[j]);
                }
            }
            Op::Narrow { x, axis, start } => {
                if needs(*x) {
                    let in_shape = self.value(*x).shape();
                    let (outer, _) = split_at_suffix(in_shape, in_shape.len() - axis);
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let dim = in_shape[*axis];
                    let len = node.value.shape()[*axis];
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; outer * dim * inner]);
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            buf[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(*p).shape()[*axis] * inner;
                    if needs(*p) {
                        let buf = grads[p.0].get_or_insert_with(|| vec![0.0; outer * chunk]);
                        for o in 0..outer {
                            for j in 0..chunk {
                                buf[o * chunk + j] += g[o * total + offset + j];
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::SumAll(a) => acc!(*a, |_j| g[0]),
            Op::SumAxis(a, axis) => {
                if needs(*a) {
                    let in_shape = self.value(*a).shape();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let dim = in_shape[*axis];
                    acc!(*a, |j| {
                        let o = j / (dim * inner);
                        let r = j % inner;
                        debug_assert!(o < outer);
                        g[o * inner + r]
                    });
                }
            }
            Op::Shift { x, axis, shift } => {
                if needs(*x) {
                    let shape = node.value.shape();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let dim = shape[*axis];
                    acc!(*x, |j| {
                        let t = (j / inner) % dim;
                        if t + shift < dim {
                            g[j + shift * inner]
                        } else {
                            0.0
                        }
                    });
                }
            }
            Op::Select {
                mask,
                on_true,
                on_false,
            } => {
                acc!(*on_true, |j| if mask[j] { g[j] } else { 0.0 });
                acc!(*on_false, |j| if mask[j] { 0.0 } else { g[j] });
            }
        }
    }
}
