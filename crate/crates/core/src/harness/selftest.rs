//! Quick built-in sanity checks, runnable from the command line on any
//! machine without the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CellKey, Checkpoint, ModelId, TrainedModel};
use crate::attention::{full_attention, probsparse_attention, ProbSparseConfig};
use crate::classical::{ClassicalModel, ForestParams, SvrParams};
use crate::data::Normalizer;
use crate::gradcheck::finite_diff_check_many;
use crate::models::{ModelConfig, NeuralModel, Variant};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive shape")
}

fn gradients(rng: &mut ChaCha8Rng) -> Check {
    let inputs = [random(&[2, 3, 4], rng), random(&[4, 4], rng), random(&[4], rng), random(&[4], rng)];
    let r = finite_diff_check_many(
        |t, v| {
            let a = t.matmul(v[0], v[1])?;
            let a = t.layer_norm(a, v[2], v[3], 1e-5)?;
            let s = t.softmax(a)?;
            let g = t.gelu(a);
            let m = t.mul(s, g)?;
            Ok(t.sum(m))
        },
        &inputs,
        1e-4,
    );
    Check {
        name: "autodiff gradients match finite differences",
        passed: r.passed,
        detail: format!("max relative error {:.2e}", r.max_rel_err),
    }
}

fn probsparse_full(rng: &mut ChaCha8Rng) -> Check {
    // With L = 8, ceil(5 ln 8) >= 8, so every query is selected.
    let (q, k, v) = (random(&[2, 8, 8], rng), random(&[2, 8, 8], rng), random(&[2, 8, 8], rng));
    let run = |sparse: bool| -> Result<Tensor, String> {
        let mut t = Tape::new();
        let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let out = if sparse {
            probsparse_attention(&mut t, q, k, v, 2, None, &ProbSparseConfig::default())
        } else {
            full_attention(&mut t, q, k, v, 2, None)
        }
        .map_err(|e| e.to_string())?;
        Ok(t.value(out).clone())
    };
    match (run(true), run(false)) {
        (Ok(a), Ok(b)) => {
            let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            Check {
                name: "ProbSparse with every query selected equals full attention",
                passed: diff <= 1e-12,
                detail: format!("max difference {diff:.2e}"),
            }
        }
        (a, b) => Check {
            name: "ProbSparse with every query selected equals full attention",
            passed: false,
            detail: format!("{:?} / {:?}", a.err(), b.err()),
        },
    }
}

fn causality(rng: &mut ChaCha8Rng) -> Check {
    let name = "decoder-only states ignore future inputs";
    let mut c = ModelConfig::new(Variant::DecoderOnly, 10, 1);
    c.d_model = 16;
    c.n_heads = 2;
    c.ffn_dim = 32;
    let result = (|| -> Result<f64, String> {
        let m = NeuralModel::build(c).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut y = x.clone();
        // The last value is the anchor, so perturb an interior position.
        y[6] += 0.5;
        let a = m.decoder_states(&x).map_err(|e| e.to_string())?;
        let b = m.decoder_states(&y).map_err(|e| e.to_string())?;
        let prefix = 6 * 16;
        Ok(a.data()[..prefix]
            .iter()
            .zip(&b.data()[..prefix])
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max))
    })();
    match result {
        Ok(diff) => Check {
            name,
            passed: diff <= 1e-12,
            detail: format!("max prefix change {diff:.2e}"),
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: e,
        },
    }
}

fn classical(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let x: Vec<f64> = (0..120).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = x.chunks(4).map(|r| r.iter().sum::<f64>() / 4.0).collect();
    let mut out = Vec::new();

    let svr = ClassicalModel::fit_svr(&x, 4, &y, 1, &SvrParams::default());
    out.push(match &svr {
        Ok(ClassicalModel::Svr(m)) => Check {
            name: "SVR dual satisfies KKT conditions",
            passed: true,
            detail: format!("{} iterations, violation {:.2e}", m[0].iterations, m[0].violation),
        },
        other => Check {
            name: "SVR dual satisfies KKT conditions",
            passed: false,
            detail: format!("{other:?}"),
        },
    });

    let p = ForestParams {
        n_trees: 1,
        max_depth: None,
        min_leaf: 1,
        max_features: Some(4),
        bootstrap: false,
        seed: 0,
    };
    let memorized = ClassicalModel::fit_forest(&x, 4, &y, 1, &p).and_then(|f| {
        let pred = f.predict_batch(&x)?;
        Ok((f, pred.iter().zip(&y).map(|(p, t)| (p[0] - t).abs()).fold(0.0, f64::max)))
    });
    out.push(match &memorized {
        Ok((_, err)) => Check {
            name: "unpruned tree memorizes its training set",
            passed: *err == 0.0,
            detail: format!("max error {err:.2e}"),
        },
        Err(e) => Check {
            name: "unpruned tree memorizes its training set",
            passed: false,
            detail: e.to_string(),
        },
    });

    if let (Ok(svr), Ok((forest, _))) = (svr, memorized) {
        let ok = [(ModelId::Svr, svr), (ModelId::RandomForest, forest)].into_iter().all(|(id, m)| {
            let ck = Checkpoint {
                cell: CellKey::new(id, 4, 1),
                norm: Normalizer { min: 1.0, max: 2.0 },
                model: TrainedModel::Classical(m),
            };
            Checkpoint::from_bytes(&ck.to_bytes()).is_ok_and(|back| back == ck)
        });
        out.push(Check {
            name: "checkpoints round-trip",
            passed: ok,
            detail: String::new(),
        });
    }
    out
}

/// Runs every check; takes well under a second.
pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checks = vec![gradients(&mut rng), probsparse_full(&mut rng), causality(&mut rng)];
    checks.extend(classical(&mut rng));
    checks
}
