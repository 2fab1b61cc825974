//! Acceptance criteria. Each returns a one-line detail on success or the
//! reason for failure.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::Rng;
use tsbench::attention::{causal_mask, full_attention, probsparse_attention, ProbSparseConfig};
use tsbench::classical::forest::{fit_tree, Node};
use tsbench::classical::{fit_svr, ForestParams, SvrParams};
use tsbench::data::{self, make_windows, SynthKind, WindowedDataset};
use tsbench::harness::grid::{cells, Manifest};
use tsbench::harness::{evaluate, fit_cell, run_grid, CellKey, DataSource, ExperimentConfig, ModelId, RunConfig};
use tsbench::metrics::{mae, mse};
use tsbench::models::{Forward, ModelConfig, NeuralModel, Variant};
use tsbench::tape::{Tape, Var};
use tsbench::tensor::Tensor;
use tsbench::train::{dataset_mse, TrainConfig, Trainer};

use super::oracles::*;

pub type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ------------------------------------------------------------ gradients

struct OpCase {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    out: Vec<usize>,
    f: fn(&mut Tape, &[Var]) -> Var,
}

fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, inputs: &[&[usize]], out: &[usize], f: fn(&mut Tape, &[Var]) -> Var) -> OpCase {
        OpCase {
            name,
            inputs: inputs.iter().map(|s| s.to_vec()).collect(),
            out: out.to_vec(),
            f,
        }
    }
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], &[3, 5], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("matmul_shared_rhs", &[&[2, 3, 4], &[4, 5]], &[2, 3, 5], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("matmul_batched", &[&[2, 3, 4], &[2, 4, 5]], &[2, 3, 5], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("add_broadcast", &[&[2, 3, 4], &[4]], &[2, 3, 4], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub_broadcast", &[&[2, 3, 4], &[3, 4]], &[2, 3, 4], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul_broadcast", &[&[2, 3, 4], &[4]], &[2, 3, 4], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("scale", &[&[2, 3]], &[2, 3], |t, v| t.scale(v[0], -1.7)),
        case("relu", &[&[2, 5]], &[2, 5], |t, v| t.relu(v[0])),
        case("gelu", &[&[2, 5]], &[2, 5], |t, v| t.gelu(v[0])),
        case("tanh", &[&[2, 5]], &[2, 5], |t, v| t.tanh(v[0])),
        case("sigmoid", &[&[2, 5]], &[2, 5], |t, v| t.sigmoid(v[0])),
        case("softmax", &[&[2, 3, 5]], &[2, 3, 5], |t, v| t.softmax(v[0]).unwrap()),
        case("masked_softmax", &[&[2, 4, 4]], &[2, 4, 4], |t, v| {
            let m = t.constant(causal_mask(4).additive());
            let s = t.add(v[0], m).unwrap();
            t.softmax(s).unwrap()
        }),
        case("layer_norm", &[&[2, 3, 6], &[6], &[6]], &[2, 3, 6], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        }),
        case("reshape", &[&[2, 3, 4]], &[6, 4], |t, v| t.reshape(v[0], &[6, 4]).unwrap()),
        case("permute", &[&[2, 3, 4]], &[4, 2, 3], |t, v| t.permute(v[0], &[2, 0, 1]).unwrap()),
        case("transpose", &[&[2, 3, 4]], &[2, 4, 3], |t, v| t.transpose(v[0]).unwrap()),
        case("narrow", &[&[2, 5, 3]], &[2, 3, 3], |t, v| t.narrow(v[0], 1, 1, 3).unwrap()),
        case("concat", &[&[2, 2, 3], &[2, 3, 3]], &[2, 5, 3], |t, v| t.concat(&[v[0], v[1]], 1).unwrap()),
        case("sum", &[&[3, 4]], &[], |t, v| t.sum(v[0])),
        case("mean", &[&[3, 4]], &[], |t, v| t.mean(v[0])),
        case("sum_axis", &[&[2, 3, 4]], &[2, 4], |t, v| t.sum_axis(v[0], 1).unwrap()),
        case("mean_axis", &[&[2, 3, 4]], &[2, 3], |t, v| t.mean_axis(v[0], 2).unwrap()),
        case("shift", &[&[2, 5, 3]], &[2, 5, 3], |t, v| t.shift(v[0], 1, 2).unwrap()),
        case("select", &[&[2, 3, 4], &[2, 3, 4]], &[2, 3, 4], |t, v| {
            let mask: Vec<bool> = (0..24).map(|i| (i * 7) % 3 == 0).collect();
            t.select(&mask, v[0], v[1]).unwrap()
        }),
    ]
}

const GRAD_SAMPLES: usize = 20;

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_op: f64 = 0.0;
    let cases = op_cases();
    for (ci, case) in cases.iter().enumerate() {
        for s in 0..GRAD_SAMPLES {
            let mut r = rng(1000 * ci as u64 + s as u64);
            let mut inputs: Vec<Tensor> = case.inputs.iter().map(|sh| tensor(sh, &mut r)).collect();
            if case.name == "relu" {
                // Keep finite differences off the kink.
                for x in inputs[0].data_mut() {
                    *x += 0.01 * x.signum();
                }
            }
            let weights = if case.out.is_empty() {
                Tensor::scalar(r.random_range(0.5..1.5))
            } else {
                tensor(&case.out, &mut r)
            };
            let f = case.f;
            let rel = fd_check(
                |t, v| {
                    let out = f(t, v);
                    let w = t.constant(weights.clone());
                    let m = t.mul(out, w).unwrap();
                    t.sum(m)
                },
                &inputs,
                1e-4,
            )
            .map_err(|e| format!("{} sample {s}: {e}", case.name))?;
            worst_op = worst_op.max(rel);
        }
    }

    let mut worst_block: f64 = 0.0;
    for s in 0..GRAD_SAMPLES {
        let mut cfg = ModelConfig::new(Variant::Vanilla, 5, 2).with_seed(s as u64);
        cfg.n_encoder_layers = 1;
        cfg.n_decoder_layers = 1;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.ffn_dim = 16;
        cfg.dropout = 0.0;
        let model = NeuralModel::build(cfg).unwrap();
        let mut r = rng(50_000 + s as u64);
        let windows = uniform(3 * 5, 0.0, 1.0, &mut r);
        let batch = model.prepare(&windows).unwrap();
        let target = Tensor::new(vec![3, 2], uniform(6, -1.0, 1.0, &mut r)).unwrap();
        let params: Vec<Tensor> = model.params().tensors().to_vec();
        let rel = fd_check(
            |t, vars| {
                let x = t.constant(batch.inputs.clone());
                let mut f = Forward {
                    tape: t,
                    params: vars,
                    dropout: 0.0,
                    rng: None,
                };
                let out = model.forward(&mut f, x).unwrap();
                let y = t.constant(target.clone());
                let d = t.sub(out, y).unwrap();
                let sq = t.mul(d, d).unwrap();
                t.mean(sq)
            },
            &params,
            1e-3,
        )
        .map_err(|e| format!("1-encoder/1-decoder block sample {s}: {e}"))?;
        worst_block = worst_block.max(rel);
    }
    let secs = start.elapsed();
    check(secs < Duration::from_secs(120), || format!("took {secs:?}, limit 2 min"))?;
    Ok(format!(
        "{} ops x {GRAD_SAMPLES} inputs, max rel err {worst_op:.1e}; block x {GRAD_SAMPLES}, max rel err {worst_block:.1e}",
        cases.len()
    ))
}

// ------------------------------------------------------------ attention

fn run_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, sparse: Option<&ProbSparseConfig>) -> Tensor {
    let mut t = Tape::new();
    let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let out = match sparse {
        Some(c) => probsparse_attention(&mut t, q, k, v, heads, None, c).unwrap(),
        None => full_attention(&mut t, q, k, v, heads, None).unwrap(),
    };
    t.value(out).clone()
}

pub fn probsparse_equivalence() -> Outcome {
    let mut r = rng(77);
    let mut worst: f64 = 0.0;
    let everything = ProbSparseConfig {
        sample_factor: 1e9,
        top_factor: 1e9,
        rng_seed: 3,
    };
    for inst in 0..100 {
        let l = r.random_range(1..=32);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..=4);
        let shape = [l, d];
        let (q, k, v) = (tensor(&shape, &mut r), tensor(&shape, &mut r), tensor(&shape, &mut r));
        check(everything.top_u(l) == l && everything.sampled_keys(l) == l, || "factors do not saturate".into())?;
        let sparse = run_attention(&q, &k, &v, heads, Some(&everything));
        let full = run_attention(&q, &k, &v, heads, None);
        let naive = naive_attention(q.data(), k.data(), v.data(), l, l, d, heads, &|_, _| true);
        for ((a, b), c) in sparse.data().iter().zip(full.data()).zip(&naive) {
            worst = worst.max((a - b).abs()).max((b - c).abs());
        }
        check(worst <= 1e-10, || format!("instance {inst} (L={l}, d={d}): difference {worst:e}"))?;
    }

    // u < L: unselected rows pass their value rows through, selected rows
    // match the literal formula.
    let mut passed_through = 0;
    for inst in 0..100 {
        let l = r.random_range(15..=32);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..=4);
        let cfg = ProbSparseConfig {
            rng_seed: inst,
            ..ProbSparseConfig::default()
        };
        let u = cfg.top_u(l);
        check(u < l, || format!("u={u} not below L={l}"))?;
        let shape = [l, d];
        let (q, k, v) = (tensor(&shape, &mut r), tensor(&shape, &mut r), tensor(&shape, &mut r));
        let out = run_attention(&q, &k, &v, heads, Some(&cfg));
        let samples: Vec<Vec<usize>> = (0..heads).map(|h| cfg.sample_key_indices(h, l)).collect();
        let (lit, chosen) = literal_probsparse(q.data(), k.data(), v.data(), l, d, heads, &samples, u);
        let dh = d / heads;
        for hd in 0..heads {
            for i in 0..l {
                let cols = i * d + hd * dh..i * d + (hd + 1) * dh;
                if chosen[hd].contains(&i) {
                    for c in cols {
                        let diff = (out.data()[c] - lit[c]).abs();
                        check(diff <= 1e-10, || format!("instance {inst}: selected row {i} head {hd} off by {diff:e}"))?;
                    }
                } else {
                    check(out.data()[cols.clone()] == v.data()[cols], || {
                        format!("instance {inst}: row {i} head {hd} is not its value row")
                    })?;
                    passed_through += 1;
                }
            }
        }
    }
    Ok(format!(
        "100 instances u=L max diff {worst:.1e}; 100 instances u<L, {passed_through} pass-through rows exact"
    ))
}

// ------------------------------------------------------------ causality

pub fn causality() -> Outcome {
    let mut r = rng(5);
    let models: Vec<(usize, NeuralModel)> = [5, 10, 15]
        .into_iter()
        .map(|l| {
            let mut c = ModelConfig::new(Variant::DecoderOnly, l, 1).with_seed(l as u64);
            // Level anchoring subtracts the last value from every position by
            // design; the network itself is what must be causal.
            c.anchor_last = false;
            (l, NeuralModel::build(c).unwrap())
        })
        .collect();
    for trial in 0..50 {
        let (l, model) = &models[trial % 3];
        let l = *l;
        let x = uniform(l, 0.0, 1.0, &mut r);
        let i = r.random_range(0..l - 1);
        let mut y = x.clone();
        for v in &mut y[i + 1..] {
            *v = r.random_range(-5.0..5.0);
        }
        let a = model.decoder_states(&x).unwrap();
        let b = model.decoder_states(&y).unwrap();
        let d = model.config().d_model;
        let prefix = (i + 1) * d;
        check(a.data()[..prefix] == b.data()[..prefix], || {
            format!("trial {trial}: L={l}, position <= {i} changed after perturbing later inputs")
        })?;
        check(a.data()[prefix..] != b.data()[prefix..], || {
            format!("trial {trial}: perturbation had no effect at all")
        })?;
    }
    Ok("50 perturbations over L in {5,10,15}, prefixes bit-identical".into())
}

// ------------------------------------------------------------ metrics

pub fn metric_oracles() -> Outcome {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = r.random_range(1..200);
        let a = uniform(n, -10.0, 10.0, &mut r);
        let b = uniform(n, -10.0, 10.0, &mut r);
        let (m1, m2) = (mae(&a, &b).unwrap(), mse(&a, &b).unwrap());
        let (o1, o2) = (naive_mae(&a, &b), naive_mse(&a, &b));
        worst = worst.max((m1 - o1).abs()).max((m2 - o2).abs());
        check(worst <= 1e-12, || format!("vector {case}: library vs loop differ by {worst:e}"))?;
        check(m2 >= m1 * m1, || format!("vector {case}: mse {m2} < mae^2 {}", m1 * m1))?;
    }

    let mut worst_scale: f64 = 0.0;
    for seed in 0..20 {
        let series = data::synth_series(SynthKind::RandomWalk, 300, seed);
        let (w, h) = ([5, 10, 15][seed as usize % 3], [1, 5, 10][seed as usize / 3 % 3]);
        let prepared = data::prepare(&series, 0.7, w, h).unwrap();
        let mut pr = rng(seed + 100);
        let preds: Vec<Vec<f64>> = (0..prepared.test.len()).map(|_| uniform(h, -0.2, 1.2, &mut pr)).collect();
        let rep = evaluate(&preds, &prepared).unwrap();
        let diff = (rep.mae_price - prepared.norm.range() * rep.mae).abs();
        worst_scale = worst_scale.max(diff);
        check(diff <= 1e-9, || format!("seed {seed}: price MAE off by {diff:e}"))?;
    }
    Ok(format!(
        "1000 vectors max diff {worst:.1e}, mse >= mae^2; 20 dual-scale checks max diff {worst_scale:.1e}"
    ))
}

// ------------------------------------------------------------ windowing

pub fn windowing() -> Outcome {
    let mut checked = 0;
    for w in [5, 10, 15] {
        for h in [1, 5, 10] {
            for len in 50..=200 {
                // Values equal to their index expose the layout directly.
                let values: Vec<f64> = (0..len).map(|i| i as f64).collect();
                let ds = make_windows(&values, w, h, 0).unwrap();
                let n = len - w - h + 1;
                check(ds.len() == n, || format!("w={w} h={h} len={len}: {} rows, expected {n}", ds.len()))?;
                for row in 0..n {
                    for j in 0..w {
                        check(ds.inputs[row * w + j] == (row + j) as f64, || format!("input layout at row {row}"))?;
                    }
                    for j in 0..h {
                        check(ds.targets[row * h + j] == (row + w + j) as f64, || format!("target layout at row {row}"))?;
                    }
                }

                let dates = data::weekdays(len);
                let series = data::PriceSeries::new(dates, values.iter().map(|v| v + 1.0).collect()).unwrap();
                let Ok(p) = data::prepare(&series, 0.7, w, h) else {
                    // Too short to window both parts; nothing can leak.
                    continue;
                };
                let n_train = (0.7 * len as f64).floor() as usize;
                check(p.train_series.len() == n_train, || format!("len={len}: train split {}", p.train_series.len()))?;
                let train_max = (0..p.train.len()).flat_map(|i| p.train.input_source(i).chain(p.train.target_source(i))).max();
                let test_min = (0..p.test.len()).flat_map(|i| p.test.target_source(i)).min();
                if let (Some(a), Some(b)) = (train_max, test_min) {
                    check(a < b, || format!("w={w} h={h} len={len}: training index {a} >= test target {b}"))?;
                }
                // Test inputs really are the values at their claimed source indices.
                for i in 0..p.test.len() {
                    let src: Vec<f64> = p.test.input_source(i).map(|s| p.norm.apply(series.closes()[s])).collect();
                    check(src == p.test.input(i), || format!("len={len}: test row {i} source mismatch"))?;
                }
                checked += 1;
            }
        }
    }
    Ok(format!("9 (w,h) pairs x lengths 50..200 ({checked} split checks), layout and disjointness exact"))
}

// ------------------------------------------------------------ fixture

pub fn fixture_path() -> PathBuf {
    std::env::var_os("TSBENCH_FIXTURE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/sp500.csv"))
}

pub fn fixture_statistics() -> Outcome {
    let path = fixture_path();
    let series = data::load_csv(&path).map_err(|e| format!("cannot load fixture: {e}"))?;
    let st = data::describe(series.closes()).ok_or("empty fixture")?;
    check(st.count == 2286, || format!("count {} != 2286", st.count))?;
    check((st.mean - 3251.59).abs() <= 0.5, || format!("mean {:.2} not within 0.5 of 3251.59", st.mean))?;
    check((st.min - 1829.08).abs() <= 0.01, || format!("min {:.2} not within 0.01 of 1829.08", st.min))?;
    check((st.max - 5321.41).abs() <= 0.01, || format!("max {:.2} not within 0.01 of 5321.41", st.max))?;
    Ok(format!("count {} mean {:.2} min {:.2} max {:.2}", st.count, st.mean, st.min, st.max))
}

// ------------------------------------------------------------ overfit

pub fn overfit() -> Outcome {
    let start = Instant::now();
    let (w, h, n) = (10, 1, 50);
    let mut r = rng(42);
    let data = WindowedDataset {
        inputs: uniform(n * w, 0.0, 1.0, &mut r),
        targets: uniform(n * h, 0.0, 1.0, &mut r),
        w,
        h,
        offset: 0,
    };
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let mut c = ModelConfig::new(v, w, h).with_seed(1);
        // Memorization checks gradient flow; dropout noise only slows it.
        c.dropout = 0.0;
        let model = NeuralModel::build(c).unwrap();
        let initial = dataset_mse(&model, &data).unwrap();
        check(initial > 1e-2, || format!("{v}: initial MSE {initial:.2e} already small"))?;
        let cfg = TrainConfig {
            validation_fraction: 0.0,
            max_epochs: 2000,
            early_stop_patience: 2000,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, &data, cfg).unwrap();
        let mut reached = None;
        for epoch in 1..=2000 {
            t.run_epoch().map_err(|e| format!("{v}: {e}"))?;
            if epoch % 10 == 0 {
                let m = dataset_mse(t.model(), &data).unwrap();
                if m < 1e-3 {
                    reached = Some((epoch, m));
                    break;
                }
            }
        }
        let (epoch, m) = reached.ok_or_else(|| {
            format!("{v}: train MSE {:.2e} after 2000 epochs", dataset_mse(t.model(), &data).unwrap())
        })?;
        parts.push(format!("{v} {m:.1e}@{epoch}"));
    }
    let secs = start.elapsed();
    check(secs < Duration::from_secs(300), || format!("took {secs:?}, limit 5 min"))?;
    Ok(parts.join(", "))
}

// ------------------------------------------------------------ classical

pub fn classical_oracles() -> Outcome {
    // SVR against the brute-force dual.
    let x = [[0.0], [0.5], [1.0]];
    let y = [0.2, 0.9, 0.4];
    let (c, eps, gamma) = (1.0, 0.05, 1.0);
    let (beta, bias) = svr_three_point_dual(&x, &y, c, eps, gamma);
    let flat: Vec<f64> = x.iter().map(|r| r[0]).collect();
    let params = SvrParams {
        c,
        epsilon: eps,
        gamma: Some(gamma),
        ..SvrParams::default()
    };
    let m = fit_svr(&flat, 1, &y, &params).map_err(|e| e.to_string())?;
    let mut svr_worst: f64 = 0.0;
    for p in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let diff = (m.predict_one(&[p]) - svr_oracle_predict(&x, &beta, bias, gamma, &[p])).abs();
        svr_worst = svr_worst.max(diff);
    }
    check(svr_worst <= 1e-3, || format!("SVR differs from brute-force dual by {svr_worst:e}"))?;

    // A fully grown tree memorizes distinct rows.
    let mut r = rng(9);
    let (n, width) = (80, 4);
    let xs = uniform(n * width, 0.0, 1.0, &mut r);
    let ys = uniform(n, -1.0, 1.0, &mut r);
    let grown = ForestParams {
        n_trees: 1,
        max_depth: None,
        min_leaf: 1,
        max_features: Some(width),
        bootstrap: false,
        seed: 0,
    };
    let tree = fit_tree(&xs, width, &ys, (0..n).collect(), &grown, 0);
    for i in 0..n {
        let p = tree.predict_one(&xs[i * width..(i + 1) * width]);
        check(p == ys[i], || format!("tree predicts {p} for target {} at row {i}", ys[i]))?;
    }

    // Depth-2 splits against exhaustive search.
    let mut split_checks = 0;
    for trial in 0..20 {
        let mut r = rng(300 + trial);
        let (n, width) = (40, 3);
        let xs = uniform(n * width, 0.0, 1.0, &mut r);
        let ys = uniform(n, -1.0, 1.0, &mut r);
        let p = ForestParams {
            max_depth: Some(2),
            min_leaf: 2,
            ..grown.clone()
        };
        let tree = fit_tree(&xs, width, &ys, (0..n).collect(), &p, trial);
        check(tree.depth() <= 2, || format!("trial {trial}: depth {}", tree.depth()))?;
        let mut stack = vec![(0usize, (0..n).collect::<Vec<_>>(), 0usize)];
        while let Some((node, rows, depth)) = stack.pop() {
            let expected = if depth < 2 { exhaustive_split(&xs, width, &ys, &rows, 2) } else { None };
            match (tree.nodes[node], expected) {
                (Node::Split { feature, threshold, left, right }, Some((ef, et))) => {
                    check(feature == ef && threshold == et, || {
                        format!("trial {trial} node {node}: split ({feature}, {threshold}) vs oracle ({ef}, {et})")
                    })?;
                    let (l, rr): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&row| xs[row * width + feature] <= threshold);
                    stack.push((left, l, depth + 1));
                    stack.push((right, rr, depth + 1));
                    split_checks += 1;
                }
                (Node::Leaf { .. }, None) => {}
                (got, want) => return Err(format!("trial {trial} node {node}: {got:?} vs oracle {want:?}")),
            }
        }
    }
    Ok(format!(
        "SVR vs dual max diff {svr_worst:.1e}; tree memorizes {n} rows; {split_checks} depth-2 splits match"
    ))
}

// ------------------------------------------------------------ synthetic benchmark

pub struct SyntheticRun {
    pub model: ModelId,
    pub horizon: usize,
    pub mae: f64,
    pub seconds: f64,
}

pub struct SyntheticBench {
    pub persistence: Vec<(usize, f64)>,
    pub runs: Vec<SyntheticRun>,
}

/// Every model on sine_trend (n = 1000, seed 0) at w = 10, h in {1, 10},
/// default training and model settings.
pub fn synthetic_bench() -> SyntheticBench {
    let cfg = ExperimentConfig::default();
    let series = data::synth_series(SynthKind::SineTrend, 1000, 0);
    let mut bench = SyntheticBench {
        persistence: Vec::new(),
        runs: Vec::new(),
    };
    for h in [1, 10] {
        let prepared = data::prepare(&series, 0.7, 10, h).unwrap();
        let base = persistence(&prepared.test.inputs, 10, h);
        bench.persistence.push((h, naive_mae(&base, &prepared.test.targets)));
        for model in ModelId::ALL {
            let start = Instant::now();
            let fit = fit_cell(&cfg, CellKey::new(model, 10, h), &prepared).unwrap();
            let preds = fit.model.predict_batch(&prepared.test.inputs).unwrap();
            let rep = evaluate(&preds, &prepared).unwrap();
            bench.runs.push(SyntheticRun {
                model,
                horizon: h,
                mae: rep.mae,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    bench
}

pub fn directional(b: &SyntheticBench) -> Outcome {
    let base = b.persistence.iter().find(|p| p.0 == 1).unwrap().1;
    let mut parts = Vec::new();
    for run in b.runs.iter().filter(|r| r.horizon == 1 && matches!(r.model, ModelId::Neural(_))) {
        check(run.mae < base, || format!("{}: MAE {:.5} does not beat persistence {base:.5}", run.model, run.mae))?;
        check(run.seconds < 180.0, || format!("{}: {:.0}s exceeds 3 min", run.model, run.seconds))?;
        parts.push(format!("{} {:.5} ({:.0}s)", run.model, run.mae, run.seconds));
    }
    Ok(format!("persistence {base:.5}; {}", parts.join(", ")))
}

pub fn horizon_monotonicity(b: &SyntheticBench) -> Outcome {
    let mut parts = Vec::new();
    for model in ModelId::ALL {
        let at = |h: usize| b.runs.iter().find(|r| r.model == model && r.horizon == h).unwrap().mae;
        let (m1, m10) = (at(1), at(10));
        check(m1 <= m10, || format!("{model}: MAE(h=1) {m1:.5} > MAE(h=10) {m10:.5}"))?;
        parts.push(format!("{model} {m1:.4}<={m10:.4}"));
    }
    Ok(parts.join(", "))
}

// ------------------------------------------------------------ full grid

/// Reduced-epoch settings for the 81-cell smoke grid.
pub fn smoke_config(data: DataSource) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        data,
        ..ExperimentConfig::default()
    };
    cfg.train.max_epochs = 10;
    cfg.train.early_stop_patience = 5;
    cfg
}

fn markdown_ok(md: &str, cells: usize) -> Result<(), String> {
    let lines: Vec<&str> = md.lines().collect();
    check(lines.len() >= 2, || "table has no header".into())?;
    for (i, l) in lines.iter().enumerate() {
        check(l.starts_with('|') && l.ends_with('|') && l.matches('|').count() == 6, || {
            format!("malformed markdown line {i}: {l}")
        })?;
    }
    let mut bold: std::collections::BTreeMap<(String, String), usize> = Default::default();
    for l in &lines[2..] {
        let cols: Vec<&str> = l.split('|').map(str::trim).collect();
        let entry = bold.entry((cols[1].to_string(), cols[2].to_string())).or_default();
        if l.contains("**") {
            *entry += 1;
        }
    }
    check(bold.len() == cells, || format!("{} (w,h) cells in table, expected {cells}", bold.len()))?;
    check(bold.values().all(|&c| c == 1), || format!("bold rows per cell: {bold:?}"))?;
    Ok(())
}

pub fn full_grid() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = RunConfig {
        experiment: smoke_config(DataSource::Synthetic {
            kind: "sine_trend".into(),
            n: 500,
            seed: 0,
        }),
        output_dir: dir.path().to_path_buf(),
        parallelism: 1,
    };
    let first = run_grid(&run, &|_| {}).map_err(|e| e.to_string())?;
    let secs = start.elapsed();
    check(first.failed.is_empty(), || format!("failed cells: {:?}", first.failed))?;
    check(first.result.rows.len() == 81 && cells(&run.experiment).len() == 81, || {
        format!("{} rows, expected 81", first.result.rows.len())
    })?;
    let md = first.result.to_markdown();
    markdown_ok(&md, 9)?;
    for key in cells(&run.experiment) {
        let d = dir.path().join("cells").join(key.dir_name());
        for f in ["checkpoint", "losses.csv", "metrics.csv", "predictions.csv"] {
            check(d.join(f).is_file(), || format!("missing {}/{f}", key.dir_name()))?;
        }
    }
    check(secs < Duration::from_secs(3600), || format!("took {secs:?}, limit 60 min"))?;

    let second = run_grid(&run, &|_| {}).map_err(|e| e.to_string())?;
    check(second.trained.is_empty() && second.skipped.len() == 81, || {
        format!("rerun trained {} cells", second.trained.len())
    })?;
    check(second.result == first.result, || "rerun changed the results".into())?;
    let reloaded = Manifest::load(dir.path()).map_err(|e| e.to_string())?.result();
    check(reloaded == first.result, || "manifest does not reproduce the results".into())?;
    Ok(format!("81 cells, 0 failures, one bold per (w,h); first run {:.0}s; rerun retrained 0", secs.as_secs_f64()))
}

/// Per-cell winners on the real fixture, for comparison only.
pub fn fixture_ranking() -> String {
    let path = fixture_path();
    if !path.is_file() {
        return format!("skipped: no fixture at {}", path.display());
    }
    let Ok(dir) = tempfile::tempdir() else {
        return "skipped: no temp dir".into();
    };
    let run = RunConfig {
        experiment: smoke_config(DataSource::Csv { path }),
        output_dir: dir.path().to_path_buf(),
        parallelism: 1,
    };
    match run_grid(&run, &|_| {}) {
        Ok(g) => {
            let mut s = String::from("winners by (w,h):");
            for ((w, h), m) in g.result.winners() {
                s.push_str(&format!(" ({w},{h})={m}"));
            }
            s + "\n" + &g.result.to_markdown()
        }
        Err(e) => format!("grid failed: {e}"),
    }
}
