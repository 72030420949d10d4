//! Finite-difference checks of individual tape operations against f64
//! closed forms evaluated by hand in the test.

use std::sync::Arc;

use proptest::prelude::*;
use sags_tensor::{ParamStore, SparseGatherPlan, Tape, Tensor};

fn fd<F: Fn(&[f64]) -> f64>(x: &[f32], f: F) -> Vec<f64> {
    let h = 1e-3f64;
    (0..x.len())
        .map(|i| {
            let mut up: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn normalize_rows_gradient() {
    let x = vec![0.3f32, -1.2, 0.7, 0.1, 2.0, -0.4, 0.9, 1.1];
    let wts = [0.5f64, -1.0, 2.0, 0.25, 1.5, -0.5, 0.75, -2.0];
    let mut store = ParamStore::new();
    let id = store.add("q", Tensor::new(2, 4, x.clone()).unwrap());
    let mut tape = Tape::new();
    let v = tape.param(&store, id);
    let n = tape.normalize_rows(v);
    let w = tape.constant(Tensor::new(2, 4, wts.iter().map(|&w| w as f32).collect()).unwrap());
    let p = tape.mul(n, w).unwrap();
    let root = tape.sum(p);
    let grads = tape.backward(root).unwrap();
    let num = fd(&x, |x| {
        let mut s = 0.0;
        for r in 0..2 {
            let row = &x[r * 4..r * 4 + 4];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            s += row.iter().zip(&wts[r * 4..]).map(|(v, w)| v / norm * w).sum::<f64>();
        }
        s
    });
    for (a, n) in grads.param(id).unwrap().data().iter().zip(num) {
        assert!((*a as f64 - n).abs() < 1e-4, "{a} vs {n}");
    }
}

#[test]
fn sigmoid_exp_chain_gradient() {
    let x = vec![-2.0f32, -0.1, 0.0, 0.4, 3.0];
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::row(x.clone()));
    let mut tape = Tape::new();
    let v = tape.param(&store, id);
    let s = tape.sigmoid(v);
    let e = tape.exp(v);
    let p = tape.mul(s, e).unwrap();
    let root = tape.sum(p);
    let grads = tape.backward(root).unwrap();
    let num = fd(&x, |x| x.iter().map(|&v| v.exp() / (1.0 + (-v).exp())).sum());
    for (a, n) in grads.param(id).unwrap().data().iter().zip(num) {
        assert!((*a as f64 - n).abs() < 1e-3 * n.abs().max(1.0), "{a} vs {n}");
    }
}

#[test]
fn sparse_gather_forward_and_backward() {
    let table = Tensor::new(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    let plan = Arc::new(SparseGatherPlan {
        rows: 2,
        groups: 1,
        taps: 2,
        indices: vec![0, 3, 2, 2],
        weights: vec![0.25, 0.75, 0.5, 0.5],
    });
    let mut store = ParamStore::new();
    let id = store.add("table", table);
    let mut tape = Tape::new();
    let t = tape.param(&store, id);
    let out = tape.sparse_gather(t, plan).unwrap();
    assert_eq!(tape.value(out).data(), &[0.25 + 5.25, 0.5 + 6.0, 5.0, 6.0]);
    let root = tape.sum(out);
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.param(id).unwrap().data(), &[0.25, 0.25, 0.0, 0.0, 1.0, 1.0, 0.75, 0.75]);
}

#[test]
fn segment_sum_gather_concat_roundtrip() {
    let mut store = ParamStore::new();
    let id = store.add("f", Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let mut tape = Tape::new();
    let f = tape.param(&store, id);
    let g = tape.gather_rows(f, Arc::from(vec![1usize, 2, 0, 0])).unwrap();
    let c = tape.concat_cols(&[g, g]).unwrap();
    let s = tape.segment_weighted_sum(c, Arc::from(vec![0.5f32, 0.5, 1.0, 0.0]), 2).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 5.0, 4.0, 5.0, 1.0, 2.0, 1.0, 2.0]);
    let sl = tape.slice_cols(s, 1, 3).unwrap();
    let root = tape.sum(sl);
    let grads = tape.backward(root).unwrap();
    // column 1 of the first copy and column 0 of the second copy survive the slice
    assert_eq!(grads.param(id).unwrap().data(), &[1.0, 1.0, 0.5, 0.5, 0.5, 0.5]);
}

proptest! {
    #[test]
    fn add_row_and_broadcast_agree(vals in proptest::collection::vec(-10.0f32..10.0, 12), bias in proptest::collection::vec(-10.0f32..10.0, 3)) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(4, 3, vals).unwrap());
        let b = tape.constant(Tensor::row(bias));
        let direct = tape.add_row(a, b).unwrap();
        let bb = tape.broadcast_rows(b, 4).unwrap();
        let via = tape.add(a, bb).unwrap();
        prop_assert_eq!(tape.value(direct).data(), tape.value(via).data());
    }

    #[test]
    fn matmul_gradient_shapes(n in 1usize..6, k in 1usize..6, m in 1usize..6) {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(n, k, 0.5));
        let b = store.add("b", Tensor::full(k, m, -0.25));
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let bv = tape.param(&store, b);
        let c = tape.matmul(av, bv).unwrap();
        let root = tape.sum(c);
        let grads = tape.backward(root).unwrap();
        prop_assert_eq!(grads.param(a).unwrap().shape(), [n, k]);
        prop_assert_eq!(grads.param(b).unwrap().shape(), [k, m]);
        // d/dA sum(AB) = 1 B^T: every entry equals the row sum of B
        for &g in grads.param(a).unwrap().data() {
            prop_assert!((g - (-0.25 * m as f32)).abs() < 1e-5);
        }
    }
}
