//! Behavior of the tape itself: accumulation, frozen branches, shape
//! rejection, plus a reduced-size run of the finite-difference suite.
//! (The full suite runs from the gradient-check binary and the
//! integration gate with 20 configurations per op.)

use dsdn_core::gradcheck::{finite_diff, kernel_suite, Coords, DEFAULT_EPS};
use dsdn_core::graph::Graph;
use dsdn_core::{Array, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn square_has_linear_gradient() {
    let g = Graph::<f64>::new();
    let x = g.leaf(&Array::scalar(3.0), true);
    let y = x.mul(&x).unwrap();
    g.backward(&y).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[6.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let g = Graph::<f64>::new();
    let x = g.leaf(&Array::scalar(3.0), true);
    let y = x.mul(&x).unwrap();
    g.backward(&y).unwrap();
    g.backward(&y).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[12.0]);
    g.zero_grads();
    assert!(x.grad().is_none());
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let g = Graph::<f64>::new();
    let x = g.leaf(&Array::scalar(2.0), true);
    let w = g.leaf(&Array::scalar(5.0), false);
    let y = x.mul(&w).unwrap();
    g.backward(&y).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[5.0]);
    assert!(w.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let g = Graph::<f64>::new();
    let x = g.leaf(&Array::zeros(&[2, 2]), true);
    let y = x.add_scalar(1.0);
    assert!(matches!(g.backward(&y), Err(TensorError::Contract(_))));
}

#[test]
fn chain_through_multiple_uses() {
    // y = x*x + 3x at x=2 -> dy/dx = 2x + 3 = 7
    let g = Graph::<f64>::new();
    let x = g.leaf(&Array::scalar(2.0), true);
    let y = x.mul(&x).unwrap().add(&x.scale(3.0)).unwrap();
    g.backward(&y).unwrap();
    assert_eq!(y.item().unwrap(), 10.0);
    assert_eq!(x.grad().unwrap().data(), &[7.0]);
}

#[test]
fn malformed_shapes_are_rejected() {
    let g = Graph::<f64>::new();
    let a = g.constant(&Array::zeros(&[2, 3]));
    let b = g.constant(&Array::zeros(&[4, 2]));
    assert!(a.matmul(&b).is_err());
    assert!(a.add(&b).is_err());
    assert!(a.reshape(&[7]).is_err());
    assert!(a.permute(&[0, 0]).is_err());
    assert!(a.slice_axis(1, 2, 2).is_err());
    assert!(a.softmax(2).is_err());

    let x = g.constant(&Array::zeros(&[1, 3, 4, 4]));
    let w = g.constant(&Array::zeros(&[2, 4, 3, 3]));
    assert!(x.conv2d(&w, None, (1, 1), (1, 1), 1).is_err());
    let w5 = g.constant(&Array::zeros(&[2, 3, 9, 9]));
    assert!(x.conv2d(&w5, None, (1, 1), (1, 1), 1).is_err());
}

#[test]
fn attention_shaped_composite_gradient_is_exact() {
    // Mimics one attention head end to end: projections, scaled scores,
    // softmax, weighted values, output projection.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (s, d) = (4, 6);
    let x = Array::<f64>::randn(&mut rng, &[1, s, d]);
    let wq = Array::<f64>::randn(&mut rng, &[d, d]);
    let wk = Array::<f64>::randn(&mut rng, &[d, d]);
    let wv = Array::<f64>::randn(&mut rng, &[d, d]);
    let (err, checked) = finite_diff(
        &[x, wq, wk, wv],
        |_, t| {
            let q = t[0].matmul(&t[1])?;
            let kt = t[0].matmul(&t[2])?.permute(&[0, 2, 1])?;
            let v = t[0].matmul(&t[3])?;
            let scores = q.matmul(&kt)?.scale(1.0 / (6f64).sqrt());
            let probs = scores.softmax(2)?;
            let out = probs.matmul(&v)?;
            out.mul(&out)?.mean_all().reshape(&[1])
        },
        DEFAULT_EPS,
        Coords::All,
        99,
    )
    .unwrap();
    assert!(checked > 100);
    assert!(err <= 1e-6, "attention composite gradient error {err}");
}

#[test]
fn kernel_suite_smoke() {
    for report in kernel_suite(3, 1).unwrap() {
        assert!(
            report.passes(1e-4),
            "{} failed with max rel err {:.3e} over {} coords",
            report.name,
            report.max_rel_err,
            report.coords_checked
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 2..24)) {
        let g = Graph::<f64>::new();
        let n = vals.len();
        let x = g.constant(&Array::new(vec![1, n], vals).unwrap());
        let y = x.softmax(1).unwrap().value();
        let sum: f64 = y.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn broadcast_add_matches_manual(rows in 1..5usize, cols in 1..5usize) {
        let g = Graph::<f64>::new();
        let a = Array::from_fn(&[rows, cols], |i| i as f64);
        let b = Array::from_fn(&[cols], |i| 10.0 * i as f64);
        let out = g.constant(&a).add(&g.constant(&b)).unwrap().value();
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(out.get(&[r, c]), a.get(&[r, c]) + b.get(&[c]));
            }
        }
    }
}
