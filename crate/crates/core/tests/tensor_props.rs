use medvqa_core::nn::{attention_with_weights, Activation, Attention, BlockConfig, LinearMap};
use medvqa_core::params::Initializer;
use medvqa_core::tensor::{grad_check, NormKind, DEFAULT_STEP};
use medvqa_core::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(
        (a, b) in (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))
    ) {
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(av, bv).unwrap();
        let want = naive_matmul(&a, &b);
        for (x, y) in t.value(c).data().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in (1usize..5, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c)), shift in -50.0f64..50.0) {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let p = t.softmax(xv).unwrap();
        let shifted = t.add_const(xv, shift).unwrap();
        let q = t.softmax(shifted).unwrap();
        let (p, q) = (t.value(p).clone(), t.value(q).clone());
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn causal_softmax_masks_future(x in (1usize..6).prop_flat_map(|n| matrix(n, n))) {
        let mut t = Tape::new();
        let xv = t.constant(x);
        let p = t.causal_softmax(xv).unwrap();
        let p = t.value(p);
        for i in 0..p.rows() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in i + 1..p.cols() {
                prop_assert_eq!(p.row(i)[j], 0.0);
            }
        }
    }

    #[test]
    fn layer_norm_rows_standardized(x in (1usize..4, 2usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        prop_assume!((0..x.rows()).all(|r| {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64 > 1e-2
        }));
        let mut t = Tape::new();
        let d = x.cols();
        let xv = t.constant(x);
        let g = t.constant(Tensor::from_fn(&[d], |_| 1.0));
        let y = t.layer_norm(xv, g, None).unwrap();
        let y = t.value(y);
        for r in 0..y.rows() {
            let row = y.row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((v - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn composite_expression_gradient() {
    let x = Tensor::from_fn(&[3, 4], |i| ((i as f64) * 0.77).sin());
    let w = Tensor::from_fn(&[5, 4], |i| ((i as f64) * 0.31).cos() * 0.5);
    let r = grad_check(
        |t, x| {
            let wv = t.constant(w.clone());
            let h = t.linear(x, wv, None)?;
            let h = t.gelu(h)?;
            let g = t.constant(Tensor::from_fn(&[5], |_| 1.1));
            let h = t.rms_norm(h, g)?;
            let h = t.softmax(h)?;
            let m = t.mean_rows(h)?;
            let sq = t.mul(m, m)?;
            t.sum(sq)
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

fn attention_fixture(causal: bool, heads: usize) -> (BlockConfig, Attention, ParamStore) {
    let cfg = BlockConfig {
        embed_dim: 8,
        num_heads: heads,
        ff_multiplier: 2,
        causal,
        norm_kind: NormKind::RmsNorm,
        activation: Activation::Silu,
    };
    let mut store = ParamStore::new();
    let mut init = Initializer::new(11);
    let mut lin = |n: &str| LinearMap::init(&mut store, &mut init, n, 8, 8, false).unwrap();
    let attn = Attention {
        q: lin("q"),
        k: lin("k"),
        v: lin("v"),
        o: lin("o"),
    };
    for (_, t) in store.iter_mut() {
        t.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += 0.2 * ((i as f64) * 1.3).sin());
    }
    (cfg, attn, store)
}

fn rows(seed: f64, n: usize) -> Tensor {
    Tensor::from_fn(&[n, 8], |i| ((i as f64) * seed).sin())
}

#[test]
fn causal_attention_ignores_future_rows() {
    let (cfg, attn, store) = attention_fixture(true, 2);
    let x = rows(0.91, 6);
    let mut y = x.clone();
    for v in &mut y.data_mut()[4 * 8..] {
        *v += 3.0;
    }
    let run = |x: &Tensor| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let (out, w) = attention_with_weights(&mut t, &store, xv, &cfg, &attn).unwrap();
        (
            t.value(out).clone(),
            w.iter().map(|&h| t.value(h).clone()).collect::<Vec<_>>(),
        )
    };
    let (a, wa) = run(&x);
    let (b, _) = run(&y);
    assert_eq!(&a.data()[..4 * 8], &b.data()[..4 * 8]);
    assert_ne!(&a.data()[4 * 8..], &b.data()[4 * 8..]);
    for w in &wa {
        for i in 0..6 {
            assert!(w.row(i)[i + 1..].iter().all(|&p| p == 0.0));
        }
    }
}

#[test]
fn bidirectional_attention_sees_every_row() {
    let (cfg, attn, store) = attention_fixture(false, 2);
    let x = rows(0.91, 6);
    let mut y = x.clone();
    for v in &mut y.data_mut()[5 * 8..] {
        *v += 3.0;
    }
    let run = |x: &Tensor| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let (out, _) = attention_with_weights(&mut t, &store, xv, &cfg, &attn).unwrap();
        t.value(out).clone()
    };
    assert_ne!(&run(&x).data()[..8], &run(&y).data()[..8]);
}

/// Swapping head blocks consistently in q, k, v rows and o columns leaves the output unchanged.
#[test]
fn head_permutation_equivariance() {
    let (cfg, attn, store) = attention_fixture(true, 2);
    let dh = 4;
    let mut swapped = store.clone();
    for n in ["q.weight", "k.weight", "v.weight"] {
        let w = swapped.get_mut(n).unwrap();
        let d = w.data_mut();
        for c in 0..8 {
            for r in 0..dh {
                d.swap(r * 8 + c, (r + dh) * 8 + c);
            }
        }
    }
    let w = swapped.get_mut("o.weight").unwrap().data_mut();
    for r in 0..8 {
        for c in 0..dh {
            w.swap(r * 8 + c, r * 8 + c + dh);
        }
    }
    let x = rows(0.37, 5);
    let run = |s: &ParamStore| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let (out, _) = attention_with_weights(&mut t, s, xv, &cfg, &attn).unwrap();
        t.value(out).clone()
    };
    assert!(run(&store).max_abs_diff(&run(&swapped)) < 1e-14);
}

#[test]
fn backward_into_accumulates_only_trainable() {
    let mut store = ParamStore::new();
    store
        .insert("a", Tensor::from_fn(&[2, 2], |i| i as f64).with_requires_grad(true))
        .unwrap();
    store.insert("b", Tensor::from_fn(&[2, 2], |i| 1.0 + i as f64)).unwrap();
    for _ in 0..2 {
        let mut t = Tape::new();
        let a = t.param(&store, "a").unwrap();
        let b = t.param(&store, "b").unwrap();
        let p = t.mul(a, b).unwrap();
        let l = t.sum(p).unwrap();
        t.backward_into(l, &mut store, 0.5).unwrap();
    }
    assert_eq!(store.get("a").unwrap().grad().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    assert!(store.get("b").unwrap().grad().is_none());
}
