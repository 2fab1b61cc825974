mod common;

use common::oracles::{literal_probsparse, naive_attention, rng, tensor, uniform};
use proptest::prelude::*;
use tsbench::attention::{
    causal_mask, full_attention, probsparse_attention, select_top_u, sparsity_measure_approx, sparsity_measure_exact,
    ProbSparseConfig,
};
use tsbench::tape::Tape;
use tsbench::tensor::Tensor;

fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool, sparse: Option<&ProbSparseConfig>) -> Tensor {
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let mask = causal.then(|| causal_mask(q.shape()[0]));
    let out = match sparse {
        Some(c) => probsparse_attention(&mut t, qv, kv, vv, heads, mask.as_ref(), c).unwrap(),
        None => full_attention(&mut t, qv, kv, vv, heads, mask.as_ref()).unwrap(),
    };
    t.value(out).clone()
}

#[test]
fn sparsity_measure_examples() {
    assert_eq!(sparsity_measure_exact(&[0.0, 0.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), 3f64.ln());
    assert_eq!(sparsity_measure_exact(&[0.3, -2.0], &[1.0, 7.0]), 0.0);
    // Scores 3 and 1 with d = 1.
    assert_eq!(sparsity_measure_approx(&[1.0], &[3.0, 1.0]), 1.0);
    assert_eq!(select_top_u(&[5.0, 1.0, 9.0], 2), vec![2, 0]);
    assert_eq!(select_top_u(&[5.0, 1.0, 9.0], 3).len(), 3);
}

#[test]
fn sparsity_measures_are_nonnegative_on_random_draws() {
    let mut r = rng(0);
    for _ in 0..1000 {
        let l = 1 + (uniform(1, 0.0, 16.0, &mut r)[0] as usize);
        let q = uniform(4, -3.0, 3.0, &mut r);
        let keys = uniform(4 * l, -3.0, 3.0, &mut r);
        assert!(sparsity_measure_exact(&q, &keys) >= 0.0);
        assert!(sparsity_measure_approx(&q, &keys) >= 0.0);
        // Unstabilized formula as the oracle.
        let s: Vec<f64> = keys.chunks(4).map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 2.0).collect();
        let naive = s.iter().map(|x| x.exp()).sum::<f64>().ln() - s.iter().sum::<f64>() / l as f64;
        assert!((sparsity_measure_exact(&q, &keys) - naive).abs() <= 1e-10);
    }
}

#[test]
fn literal_oracle_at_small_size() {
    // L = 8, d = 4, u = 2.
    let mut r = rng(4);
    let (q, k, v) = (tensor(&[8, 4], &mut r), tensor(&[8, 4], &mut r), tensor(&[8, 4], &mut r));
    let cfg = ProbSparseConfig {
        top_factor: 2.0 / 8f64.ln(),
        ..ProbSparseConfig::default()
    };
    assert_eq!(cfg.top_u(8), 2);
    let out = attend(&q, &k, &v, 1, false, Some(&cfg));
    let (lit, chosen) = literal_probsparse(q.data(), k.data(), v.data(), 8, 4, 1, &[cfg.sample_key_indices(0, 8)], 2);
    assert_eq!(chosen[0].len(), 2);
    for (a, b) in out.data().iter().zip(&lit) {
        assert!((a - b).abs() <= 1e-10);
    }
}

proptest! {
    #[test]
    fn full_attention_matches_naive(l in 1usize..12, heads in 1usize..4, dh in 1usize..4, causal: bool, seed in any::<u64>()) {
        let d = heads * dh;
        let mut r = rng(seed);
        let (q, k, v) = (tensor(&[l, d], &mut r), tensor(&[l, d], &mut r), tensor(&[l, d], &mut r));
        let out = attend(&q, &k, &v, heads, causal, None);
        let want = naive_attention(q.data(), k.data(), v.data(), l, l, d, heads, &|i, j| !causal || j <= i);
        for (a, b) in out.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn causal_rows_ignore_later_inputs(l in 2usize..16, cut in 0usize..15, seed in any::<u64>()) {
        let i = cut % (l - 1);
        let mut r = rng(seed);
        let (q, k, v) = (tensor(&[l, 4], &mut r), tensor(&[l, 4], &mut r), tensor(&[l, 4], &mut r));
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for x in [&mut q2, &mut k2, &mut v2] {
            for val in &mut x.data_mut()[(i + 1) * 4..] {
                *val = *val * 3.0 - 1.0;
            }
        }
        let a = attend(&q, &k, &v, 2, true, None);
        let b = attend(&q2, &k2, &v2, 2, true, None);
        prop_assert_eq!(&a.data()[..(i + 1) * 4], &b.data()[..(i + 1) * 4]);
    }

    #[test]
    fn probsparse_is_deterministic(l in 1usize..40, seed in any::<u64>(), rng_seed in any::<u64>()) {
        let mut r = rng(seed);
        let (q, k, v) = (tensor(&[l, 4], &mut r), tensor(&[l, 4], &mut r), tensor(&[l, 4], &mut r));
        let cfg = ProbSparseConfig { rng_seed, ..ProbSparseConfig::default() };
        prop_assert_eq!(attend(&q, &k, &v, 2, false, Some(&cfg)), attend(&q, &k, &v, 2, false, Some(&cfg)));
    }

    #[test]
    fn key_samples_are_distinct_and_in_range(l in 1usize..200, head in 0usize..8, rng_seed in any::<u64>()) {
        let cfg = ProbSparseConfig { rng_seed, ..ProbSparseConfig::default() };
        let s = cfg.sample_key_indices(head, l);
        prop_assert_eq!(s.len(), cfg.sampled_keys(l));
        prop_assert!(s.len() >= 1 && s.len() <= l);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| i < l));
        prop_assert_eq!(s, cfg.sample_key_indices(head, l));
        let u = cfg.top_u(l);
        prop_assert!(u >= 1 && u <= l);
    }

    #[test]
    fn top_u_matches_stable_sort(scores in prop::collection::vec(0i32..5, 1..30), u_raw in 1usize..30) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let u = u_raw.min(scores.len());
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // A stable sort keeps lower indices first among equal scores.
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        prop_assert_eq!(select_top_u(&scores, u), order[..u].to_vec());
    }
}
