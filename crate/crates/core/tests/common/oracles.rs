//! Reference implementations written independently of the library: plain
//! loops, brute force and literal formulas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsbench::tape::{Tape, Var};
use tsbench::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(n, -1.0, 1.0, rng)).unwrap()
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;
pub const ABS_BELOW: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-7;

/// Central finite differences against the tape's backward pass. Returns the
/// largest relative error (elements with analytic magnitude ≥ 1e-6) or an
/// error string if any element fails, including absolute-fallback elements.
pub fn fd_check<F>(f: F, inputs: &[Tensor], rel_tol: f64) -> Result<f64, String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vars);
        t.value(out).data()[0]
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.var(v.clone())).collect();
    let out = f(&mut t, &vars);
    t.backward(out).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = t.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&probe);
            probe[k].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&probe);
            probe[k].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(format!("input {k}[{j}]: non-finite gradient {a} vs {numeric}"));
            }
            if a.abs() < ABS_BELOW {
                if (a - numeric).abs() > ABS_TOL {
                    return Err(format!("input {k}[{j}]: analytic {a:e} numeric {numeric:e}"));
                }
            } else {
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                worst = worst.max(rel);
                if rel > rel_tol {
                    return Err(format!("input {k}[{j}]: analytic {a:e} numeric {numeric:e} rel {rel:e}"));
                }
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------- attention

/// Per-head softmax attention by explicit loops over `[L, d]` row-major
/// inputs; `allowed(i, j)` masks keys.
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    l_q: usize,
    l_k: usize,
    d: usize,
    heads: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; l_q * d];
    for hd in 0..heads {
        let off = hd * dh;
        for i in 0..l_q {
            let mut scores = Vec::new();
            for j in 0..l_k {
                if !allowed(i, j) {
                    continue;
                }
                let mut s = 0.0;
                for t in 0..dh {
                    s += q[i * d + off + t] * k[j * d + off + t];
                }
                scores.push((j, s / (dh as f64).sqrt()));
            }
            let m = scores.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|p| (p.1 - m).exp()).sum();
            for &(j, s) in &scores {
                let p = (s - m).exp() / z;
                for t in 0..dh {
                    out[i * d + off + t] += p * v[j * d + off + t];
                }
            }
        }
    }
    out
}

/// ProbSparse self-attention applied literally: the full score matrix per
/// head, the max-minus-mean measure on the given sampled keys, the top `u`
/// queries (ties to the lower index) attending to every key, and every other
/// query returning its own value row.
pub fn literal_probsparse(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    l: usize,
    d: usize,
    heads: usize,
    samples: &[Vec<usize>],
    u: usize,
) -> (Vec<f64>, Vec<Vec<usize>>) {
    let dh = d / heads;
    let full = naive_attention(q, k, v, l, l, d, heads, &|_, _| true);
    let mut out = v.to_vec();
    let mut chosen = Vec::new();
    for hd in 0..heads {
        let off = hd * dh;
        let score = |i: usize, j: usize| -> f64 {
            (0..dh).map(|t| q[i * d + off + t] * k[j * d + off + t]).sum::<f64>() / (dh as f64).sqrt()
        };
        let measure: Vec<f64> = (0..l)
            .map(|i| {
                let s: Vec<f64> = samples[hd].iter().map(|&j| score(i, j)).collect();
                s.iter().copied().fold(f64::NEG_INFINITY, f64::max) - s.iter().sum::<f64>() / s.len() as f64
            })
            .collect();
        // Selection by repeated arg-max, scanning indices upward.
        let mut taken = vec![false; l];
        let mut top = Vec::new();
        for _ in 0..u {
            let mut best: Option<usize> = None;
            for i in 0..l {
                if !taken[i] && best.is_none_or(|b| measure[i] > measure[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            top.push(b);
        }
        for &i in &top {
            out[i * d + off..i * d + off + dh].copy_from_slice(&full[i * d + off..i * d + off + dh]);
        }
        chosen.push(top);
    }
    (out, chosen)
}

// ---------------------------------------------------------------- metrics

pub fn naive_mae(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

pub fn naive_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

/// Predicts the last observed value for every step.
pub fn persistence(inputs: &[f64], w: usize, h: usize) -> Vec<f64> {
    inputs.chunks(w).flat_map(|row| std::iter::repeat_n(row[w - 1], h)).collect()
}

// ---------------------------------------------------------------- models

pub struct Widths {
    pub d: usize,
    pub ffn: usize,
    pub enc: usize,
    pub dec: usize,
    pub h: usize,
    pub lstm_layers: usize,
    pub tcn_blocks: usize,
    pub kernel: usize,
}

/// Closed-form parameter counts, by model id.
pub fn param_count(model: &str, s: &Widths) -> usize {
    let (d, f, h) = (s.d, s.ffn, s.h);
    let linear = |i: usize, o: usize| i * o + o;
    let attn = 4 * linear(d, d);
    let ff = linear(d, f) + linear(f, d);
    let ln = 2 * d;
    let enc_layer = attn + ff + 2 * ln;
    let dec_cross = 2 * attn + ff + 3 * ln;
    let dec_plain = attn + ff + 2 * ln;
    let embed = linear(1, d);
    let per_position_head = h * d + h;
    match model {
        "encoder_only" => embed + s.enc * enc_layer + linear(d, h),
        "decoder_only" => embed + s.dec * dec_plain + linear(d, h),
        "vanilla" | "probsparse" => embed + s.enc * enc_layer + s.dec * dec_cross + embed + per_position_head,
        "no_embedding" => s.enc * enc_layer + s.dec * dec_cross + per_position_head,
        "lstm" => {
            let gates = |input: usize| 4 * d * input + 4 * d * d + 4 * d;
            gates(1) + (s.lstm_layers - 1) * gates(d) + linear(d, h)
        }
        "tcn" => {
            let conv = |c_in: usize| s.kernel * c_in * d + d;
            let first = conv(1) + conv(d) + linear(1, d);
            first + (s.tcn_blocks - 1) * 2 * conv(d) + linear(d, h)
        }
        other => panic!("no closed form for {other}"),
    }
}

// ---------------------------------------------------------------- classical

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).exp()
}

/// Epsilon-SVR on three points by grid search over the dual in
/// `β = α - α*` (Σβ = 0, |β| ≤ C), zooming in around the best grid point.
/// Returns `(β, b)` with the bias taken from the free support vectors.
pub fn svr_three_point_dual(x: &[[f64; 1]; 3], y: &[f64; 3], c: f64, eps: f64, gamma: f64) -> ([f64; 3], f64) {
    let k = |i: usize, j: usize| rbf(&x[i], &x[j], gamma);
    let objective = |b: &[f64; 3]| -> f64 {
        let mut quad = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                quad += b[i] * b[j] * k(i, j);
            }
        }
        0.5 * quad + eps * b.iter().map(|v| v.abs()).sum::<f64>() - (0..3).map(|i| y[i] * b[i]).sum::<f64>()
    };
    let (mut c1, mut c2, mut half) = (0.0, 0.0, c);
    let mut best = [0.0; 3];
    for _ in 0..40 {
        let steps = 60;
        let mut round_best = (f64::INFINITY, [0.0; 3]);
        for a in 0..=steps {
            for bb in 0..=steps {
                let b1 = (c1 - half + 2.0 * half * a as f64 / steps as f64).clamp(-c, c);
                let b2 = (c2 - half + 2.0 * half * bb as f64 / steps as f64).clamp(-c, c);
                let b3 = -b1 - b2;
                if b3.abs() > c {
                    continue;
                }
                let cand = [b1, b2, b3];
                let o = objective(&cand);
                if o < round_best.0 {
                    round_best = (o, cand);
                }
            }
        }
        best = round_best.1;
        c1 = best[0];
        c2 = best[1];
        half *= 0.25;
    }
    let f = |i: usize| (0..3).map(|j| best[j] * k(i, j)).sum::<f64>();
    let free: Vec<f64> = (0..3)
        .filter(|&i| best[i].abs() > 1e-6 && best[i].abs() < c - 1e-6)
        .map(|i| y[i] - f(i) - eps * best[i].signum())
        .collect();
    assert!(!free.is_empty(), "oracle dataset must leave a free support vector");
    let bias = free.iter().sum::<f64>() / free.len() as f64;
    (best, bias)
}

pub fn svr_oracle_predict(x: &[[f64; 1]; 3], beta: &[f64; 3], bias: f64, gamma: f64, at: &[f64]) -> f64 {
    (0..3).map(|i| beta[i] * rbf(&x[i], at, gamma)).sum::<f64>() + bias
}

/// Exhaustive best split of `rows`: every feature, every midpoint between
/// consecutive distinct values, children of at least `min_leaf` rows,
/// sum of squared errors recomputed from scratch. Ties keep the lowest
/// feature, then the lowest threshold.
pub fn exhaustive_split(x: &[f64], width: usize, y: &[f64], rows: &[usize], min_leaf: usize) -> Option<(usize, f64)> {
    let sse = |idx: &[usize]| -> f64 {
        let m = idx.iter().map(|&r| y[r]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&r| (y[r] - m).powi(2)).sum()
    };
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..width {
        let mut vals: Vec<f64> = rows.iter().map(|&r| x[r * width + f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for pair in vals.windows(2) {
            let t = 0.5 * (pair[0] + pair[1]);
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&row| x[row * width + f] <= t);
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let s = sse(&l) + sse(&r);
            // Strict improvement beyond rounding noise replaces the incumbent.
            if best.is_none_or(|b| s < b.0 - 1e-12 * b.0.abs().max(1.0)) {
                best = Some((s, f, t));
            }
        }
    }
    best.map(|b| (b.1, b.2))
}
