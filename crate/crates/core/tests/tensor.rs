mod common;

use common::{max_grad_error, random_tensor, random_vec};
use proptest::prelude::*;
use taemi_core::oracle::{gelu as reference_gelu, naive_softmax};
use taemi_core::tensor::{Graph, Tensor};
use taemi_core::{seeded_rng, Error};

const FD_TOL: f64 = 1e-6;

#[test]
fn matmul_by_identity_returns_input() {
    let a = random_tensor(&[3, 4], 1);
    let eye = Tensor::matrix(4, 4, (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let ev = g.constant(eye);
    let out = g.matmul(av, ev).unwrap();
    assert_eq!(g.value(out), a.data());
}

#[test]
fn matmul_selector_picks_columns() {
    let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    // picks column 2 then column 0
    let sel = Tensor::matrix(3, 2, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let av = g.constant(a);
    let sv = g.constant(sel);
    let out = g.matmul(av, sv).unwrap();
    assert_eq!(g.value(out), &[3.0, 1.0, 6.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(random_tensor(&[2, 3], 1));
    let b = g.constant(random_tensor(&[2, 3], 2));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let b = random_tensor(&[4, 3], 2);
    let err = max_grad_error(
        &random_tensor(&[2, 4], 1),
        |g, x| {
            let bv = g.constant(b.clone());
            g.matmul(x, bv)
        },
        1e-3,
    );
    assert!(err < FD_TOL, "lhs {err}");
    let a = random_tensor(&[2, 4], 3);
    let err = max_grad_error(
        &b,
        |g, x| {
            let av = g.constant(a.clone());
            g.matmul(av, x)
        },
        1e-3,
    );
    assert!(err < FD_TOL, "rhs {err}");
}

#[test]
fn matmul_bt_equals_explicit_transpose() {
    let a = random_tensor(&[3, 5], 1);
    let b = random_tensor(&[4, 5], 2);
    let mut bt = vec![0.0; 20];
    for i in 0..4 {
        for j in 0..5 {
            bt[j * 4 + i] = b.data()[i * 5 + j];
        }
    }
    let mut g = Graph::new();
    let av = g.constant(a);
    let bv = g.constant(b);
    let btv = g.constant(Tensor::matrix(5, 4, bt).unwrap());
    let x = g.matmul_bt(av, bv).unwrap();
    let y = g.matmul(av, btv).unwrap();
    for (p, q) in g.value(x).iter().zip(g.value(y)) {
        assert!((p - q).abs() < 1e-14);
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.3; 4]));
    let y = g.softmax(x, None).unwrap();
    assert_eq!(g.value(y), &[0.25; 4]);
}

#[test]
fn softmax_mask_gives_masked_positions_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 50.0, 1.0]));
    let y = g.softmax(x, Some(&[true, false, true])).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.0, 0.5]);
}

#[test]
fn softmax_with_everything_masked_is_degenerate() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.softmax(x, Some(&[false, false])), Err(Error::DegenerateMask { .. })));
}

#[test]
fn softmax_matches_naive_reference() {
    for seed in 0..20 {
        let n = 2 + seed as usize % 7;
        let logits: Vec<f64> = random_vec(n, seed).iter().map(|v| v * 20.0).collect();
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || !(i as u64 + seed).is_multiple_of(3)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(logits.clone()));
        let y = g.softmax(x, Some(&mask)).unwrap();
        let expected = naive_softmax(&logits, Some(&mask)).unwrap();
        for (a, b) in g.value(y).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
        let sum: f64 = g.value(y).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_are_independent() {
    let x = random_tensor(&[3, 5], 7);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.softmax(xv, None).unwrap();
    for r in 0..3 {
        let expected = naive_softmax(x.row(r), None).unwrap();
        for (a, b) in g.value(y)[r * 5..(r + 1) * 5].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_gradients_match_finite_differences() {
    let mask = [true, false, true, true, false];
    let err = max_grad_error(&random_tensor(&[2, 5], 4), |g, x| g.softmax(x, Some(&mask)), 1e-3);
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn gelu_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 1.0, -1.0]));
    let y = g.gelu(x);
    assert_eq!(g.value(y)[0], 0.0);
    assert!((g.value(y)[1] - reference_gelu(1.0)).abs() < 1e-14);
    assert!((g.value(y)[2] - reference_gelu(-1.0)).abs() < 1e-14);
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let x = Tensor::vector(vec![-2.0, -0.5, 0.5, 2.0]);
    let err = max_grad_error(&x, |g, x| Ok(g.gelu(x)), 1e-3);
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let gamma = random_tensor(&[6], 5);
    let beta = random_tensor(&[6], 6);
    let err = max_grad_error(
        &random_tensor(&[3, 6], 4),
        |g, x| {
            let gv = g.constant(gamma.clone());
            let bv = g.constant(beta.clone());
            g.layer_norm(x, gv, bv, 1e-5)
        },
        1e-3,
    );
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn structural_ops_gradients_match_finite_differences() {
    let err = max_grad_error(
        &random_tensor(&[4, 6], 8),
        |g, x| {
            let top = g.slice_rows(x, 0, 2)?;
            let left = g.slice_cols(x, 1, 3)?;
            let pooled = g.mean_rows(x, Some(&[true, false, true, true]))?;
            let pooled = g.reshape(pooled, vec![1, 6])?;
            let masked = g.mask_rows(x, &[false, true, true, false])?;
            let stacked = g.concat_rows(&[top, pooled, masked])?;
            let stacked = g.gelu(stacked);
            let left = g.scale(left, 1.5);
            let sq = g.mul(left, left)?;
            let wide = g.concat_cols(&[sq, left])?;
            let a = g.sum(stacked);
            let b = g.sum(wide);
            let s = g.sub(a, b)?;
            g.add(s, a)
        },
        1e-3,
    );
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn dropout_at_zero_is_identity_and_at_one_is_rejected() {
    let mut rng = seeded_rng(0, 0);
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(Error::Parameter(_))));
}

#[test]
fn dropout_scales_kept_units() {
    let mut rng = seeded_rng(0, 0);
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0; 2000]));
    let y = g.dropout(x, 0.25, true, &mut rng).unwrap();
    let kept = g.value(y).iter().filter(|&&v| v != 0.0).count();
    assert!(g.value(y).iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
    assert!((1400..1600).contains(&kept), "{kept}");
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]).requiring_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let s = g.sum(xv);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_is_twice_input() {
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]).requiring_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_needs_a_scalar_loss() {
    let x = Tensor::vector(vec![1.0, 2.0]).requiring_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    assert!(matches!(g.backward(xv), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_leaf_gradients() {
    let x = Tensor::vector(vec![1.0, -1.0]).requiring_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let s = g.sum(xv);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[2.0, 2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let x = g.input(Tensor::vector(vec![3.0, 4.0]).requiring_grad());
    let p = g.mul(c, x).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let x = random_tensor(&[4, 5], 3).requiring_grad();
        let w = random_tensor(&[5, 5], 4);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let wv = g.constant(w);
        let h = g.matmul(xv, wv).unwrap();
        let h = g.softmax(h, None).unwrap();
        let h = g.gelu(h);
        let s = g.sum(h);
        g.backward(s).unwrap();
        g.grad(xv).unwrap().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn tensor_rejects_inconsistent_shapes() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    assert!(Tensor::scalar(2.5).item().unwrap() == 2.5);
    assert!(Tensor::vector(vec![1.0, 2.0]).item().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-30.0f64..30.0, 1..12), shift in -5.0f64..5.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(xs.clone()));
        let y = g.softmax(x, None).unwrap();
        let sum: f64 = g.value(y).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(g.value(y).iter().all(|&p| (0.0..=1.0).contains(&p)));
        let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
        let z = g.constant(Tensor::vector(shifted));
        let w = g.softmax(z, None).unwrap();
        for (a, b) in g.value(y).iter().zip(g.value(w)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_linear_in_the_left_operand(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
        c in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let mut g = Graph::new();
        let av = g.constant(Tensor::matrix(2, 3, a).unwrap());
        let bv = g.constant(Tensor::matrix(2, 3, b).unwrap());
        let cv = g.constant(Tensor::matrix(3, 2, c).unwrap());
        let sum = g.add(av, bv).unwrap();
        let lhs = g.matmul(sum, cv).unwrap();
        let ac = g.matmul(av, cv).unwrap();
        let bc = g.matmul(bv, cv).unwrap();
        let rhs = g.add(ac, bc).unwrap();
        for (x, y) in g.value(lhs).iter().zip(g.value(rhs)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
