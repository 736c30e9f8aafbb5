//! Property tests for the autodiff tape: every differentiable op is checked
//! against finite differences on random inputs, plus algebraic invariants.

use proptest::prelude::*;
use tsasr_core::tensor::{grad_check, Tape, Tensor};

fn tensor_strategy(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let numel: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, numel)
        .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
}

const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_add(a in tensor_strategy(vec![2, 3]), b in tensor_strategy(vec![2, 3])) {
        let err = grad_check(|t, v| {
            let s = t.add(v[0], v[1])?;
            let s = t.tanh(s);
            Ok(t.sum_all(s))
        }, &[a, b], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_sub_mul(a in tensor_strategy(vec![2, 3]), b in tensor_strategy(vec![2, 3])) {
        let err = grad_check(|t, v| {
            let d = t.sub(v[0], v[1])?;
            let p = t.mul(d, v[0])?;
            Ok(t.sum_all(p))
        }, &[a, b], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_scale_exp(a in tensor_strategy(vec![4])) {
        let err = grad_check(|t, v| {
            let s = t.scale(v[0], 0.37);
            let e = t.exp(s);
            Ok(t.sum_all(e))
        }, &[a], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_ln(a in prop::collection::vec(0.1f64..3.0, 5)) {
        let a = Tensor::new(vec![5], a).unwrap();
        let err = grad_check(|t, v| {
            let l = t.ln(v[0]);
            Ok(t.sum_all(l))
        }, &[a], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_matmul_transpose(a in tensor_strategy(vec![2, 3]), b in tensor_strategy(vec![3, 2])) {
        let err = grad_check(|t, v| {
            let c = t.matmul(v[0], v[1])?;
            let ct = t.transpose(c)?;
            let s = t.mul(ct, ct)?;
            Ok(t.sum_all(s))
        }, &[a, b], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_softmax(a in tensor_strategy(vec![3, 4])) {
        let err = grad_check(|t, v| {
            let s = t.softmax_rows(v[0])?;
            let w = t.leaf(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap());
            let p = t.mul(s, w)?;
            Ok(t.sum_all(p))
        }, &[a], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_log_softmax(a in tensor_strategy(vec![2, 5])) {
        let err = grad_check(|t, v| {
            let s = t.log_softmax_rows(v[0])?;
            let p = t.get(s, 3)?;
            let q = t.get(s, 7)?;
            t.add(p, q)
        }, &[a], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_row_broadcasts(a in tensor_strategy(vec![3, 4]), row in tensor_strategy(vec![4])) {
        let err = grad_check(|t, v| {
            let s = t.add_row(v[0], v[1])?;
            let m = t.mul_row(s, v[1])?;
            let m = t.tanh(m);
            Ok(t.sum_all(m))
        }, &[a, row], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_mean_rows(a in tensor_strategy(vec![4, 3])) {
        let err = grad_check(|t, v| {
            let m = t.mean_rows(v[0])?;
            let sq = t.mul(m, m)?;
            Ok(t.sum_all(sq))
        }, &[a], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_layer_norm(
        a in tensor_strategy(vec![3, 6]),
        gain in tensor_strategy(vec![6]),
        bias in tensor_strategy(vec![6]),
    ) {
        let err = grad_check(|t, v| {
            let n = t.layer_norm_rows(v[0], v[1], v[2], 1e-5)?;
            let n = t.tanh(n);
            Ok(t.sum_all(n))
        }, &[a, gain, bias], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_slices_concats(a in tensor_strategy(vec![4, 6])) {
        let err = grad_check(|t, v| {
            let l = t.slice_cols(v[0], 0, 3)?;
            let r = t.slice_cols(v[0], 3, 3)?;
            let swapped = t.concat_cols(&[r, l])?;
            let top = t.slice_rows(swapped, 0, 2)?;
            let bot = t.slice_rows(swapped, 2, 2)?;
            let stacked = t.concat_rows(&[bot, top])?;
            let sq = t.mul(stacked, stacked)?;
            Ok(t.sum_all(sq))
        }, &[a], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_embed(table in tensor_strategy(vec![5, 3])) {
        let err = grad_check(|t, v| {
            let e = t.embed_rows(v[0], &[4, 0, 4, 2])?;
            let e = t.tanh(e);
            Ok(t.sum_all(e))
        }, &[table], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_pairwise_sum(a in tensor_strategy(vec![3, 2]), b in tensor_strategy(vec![4, 2])) {
        let err = grad_check(|t, v| {
            let p = t.pairwise_sum_rows(v[0], v[1])?;
            let p = t.tanh(p);
            Ok(t.sum_all(p))
        }, &[a, b], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn grad_logaddexp_get_sumvars(a in tensor_strategy(vec![4]), b in tensor_strategy(vec![4])) {
        let err = grad_check(|t, v| {
            let l = t.logaddexp(v[0], v[1])?;
            let p0 = t.get(l, 0)?;
            let p2 = t.get(l, 2)?;
            t.sum_vars(&[p0, p2])
        }, &[a, b], EPS).unwrap();
        prop_assert!(err <= GRAD_TOL, "rel err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(a in tensor_strategy(vec![3, 5])) {
        let mut t = Tape::new();
        let v = t.leaf(a);
        let s = t.softmax_rows(v).unwrap();
        let out = t.value(s);
        for r in 0..3 {
            let sum: f64 = out.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
        }
    }

    #[test]
    fn softmax_shift_invariant(a in tensor_strategy(vec![2, 4]), c in -50.0f64..50.0) {
        let mut t = Tape::new();
        let v = t.leaf(a.clone());
        let s1 = t.softmax_rows(v).unwrap();
        let mut shifted = a;
        for x in shifted.data_mut() {
            *x += c;
        }
        let v2 = t.leaf(shifted);
        let s2 = t.softmax_rows(v2).unwrap();
        for (x, y) in t.value(s1).data().iter().zip(t.value(s2).data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_associative(
        a in tensor_strategy(vec![2, 3]),
        b in tensor_strategy(vec![3, 4]),
        c in tensor_strategy(vec![4, 2]),
    ) {
        let mut t = Tape::new();
        let (va, vb, vc) = (t.leaf(a), t.leaf(b), t.leaf(c));
        let ab = t.matmul(va, vb).unwrap();
        let ab_c = t.matmul(ab, vc).unwrap();
        let bc = t.matmul(vb, vc).unwrap();
        let a_bc = t.matmul(va, bc).unwrap();
        for (x, y) in t.value(ab_c).data().iter().zip(t.value(a_bc).data()) {
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn forward_values_are_deterministic(a in tensor_strategy(vec![3, 3])) {
        let run = |input: &Tensor| {
            let mut t = Tape::new();
            let v = t.param(input.clone());
            let h = t.tanh(v);
            let s = t.softmax_rows(h).unwrap();
            let m = t.matmul(s, v).unwrap();
            let loss = t.sum_all(m);
            let bits = t.value(loss).value().to_bits();
            t.backward(loss).unwrap();
            (bits, t.grad(v).unwrap().bits_hash())
        };
        prop_assert_eq!(run(&a), run(&a));
    }
}
