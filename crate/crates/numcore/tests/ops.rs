use numcore::{finite_diff_grad, relative_error, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_and_dot() {
    let tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
    assert_eq!(i2.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);

    let row = tape.constant(Tensor::from_rows(&[vec![1., 2.]]).unwrap());
    let col = tape.constant(Tensor::from_rows(&[vec![3.], vec![4.]]).unwrap());
    let out = row.matmul(col).unwrap().value();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let tape = Tape::new();
    let c = tape
        .constant(a.clone())
        .matmul(tape.constant(b.clone()))
        .unwrap()
        .value();
    let oracle = naive_matmul(&a, &b);
    for (x, y) in c.data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    match a.matmul(b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn batched_and_transposed_matmul_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 5, 4], &mut rng);
    let tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let direct = va.matmul_t(vb).unwrap().value();
    let via_t = va.matmul(vb.transpose().unwrap()).unwrap().value();
    assert_eq!(direct.shape(), &[2, 3, 5]);
    assert!(direct.max_abs_diff(&via_t) < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_oracle_up_to_32(m in 1usize..=32, k in 1usize..=32, n in 1usize..=32, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        let oracle = naive_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(&oracle) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_at_large_magnitude(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let tape = Tape::new();
        let y = tape.constant(Tensor::from_vec(v)).softmax(0).unwrap().value();
        let s: f64 = y.data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-10);
        prop_assert!(y.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_shift_invariant(v in prop::collection::vec(-5.0f64..5.0, 1..12), c in -50.0f64..50.0) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(v));
        let a = x.softmax(0).unwrap().value();
        let b = x.add_scalar(c).softmax(0).unwrap().value();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let y = tape
        .constant(Tensor::from_vec(vec![0., 0.]))
        .softmax(0)
        .unwrap()
        .value();
    assert_eq!(y.data(), &[0.5, 0.5]);

    let y = tape
        .constant(Tensor::from_vec(vec![1., 2., 3.]))
        .softmax(0)
        .unwrap()
        .value();
    let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
    for (i, p) in y.data().iter().enumerate() {
        assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_on_inner_axis() {
    let tape = Tape::new();
    let x = Tensor::new(&[2, 3], vec![1., 5., 2., 1., 5., 2.]).unwrap();
    let y = tape.constant(x).softmax(0).unwrap().value();
    // columns are equal pairs
    assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    assert!(tape.constant(Tensor::zeros(&[2])).softmax(1).is_err());
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let c = tape
        .constant(Tensor::from_vec(vec![4.0; 6]))
        .layer_norm(None, None, 1e-5)
        .unwrap()
        .value();
    assert!(c.data().iter().all(|&v| v == 0.0));

    let y = tape
        .constant(Tensor::from_vec(vec![1., 2., 3.]))
        .layer_norm(None, None, 0.0)
        .unwrap()
        .value();
    let r = 1.5f64.sqrt();
    let expected = [-r, 0.0, r];
    for (a, b) in y.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[4, 17], |_| rng.random_range(-3.0..7.0));
    let y = tape.constant(x).layer_norm(None, None, 1e-12).unwrap().value();
    for r in 0..4 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 17.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn activation_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![0.0, 1.0, -3.0]));
    let g = x.gelu().value();
    assert_eq!(g.data()[0], 0.0);
    let oracle = 0.5 * (1.0 + erf_simpson(1.0 / 2f64.sqrt()));
    assert!((g.data()[1] - oracle).abs() < 1e-12);
    assert!((g.data()[1] - 0.841345).abs() < 1e-5);
    assert_eq!(x.silu().value().data()[0], 0.0);
    assert_eq!(x.relu().value().data()[2], 0.0);
}

// erf by composite Simpson quadrature of the Gaussian density.
fn erf_simpson(x: f64) -> f64 {
    let n = 2000;
    let h = x / n as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(0.0) + f(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * h);
    }
    s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3, 2]));
    let g = tape.backward(x.sum()).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1., 2.]));
    let loss = x.mul(x).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(x.exp()), Err(TensorError::NonScalarLoss(s)) if s == vec![3]));
}

#[test]
fn replaying_backward_yields_identical_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::new();
    let w = tape.leaf(random(&[4, 3], &mut rng));
    let x = tape.constant(random(&[5, 4], &mut rng));
    let loss = x.matmul(w).unwrap().gelu().softmax(1).unwrap().square().sum();
    let g1 = tape.backward(loss).unwrap();
    let g2 = tape.backward(loss).unwrap();
    assert_eq!(g1.get(w).unwrap(), g2.get(w).unwrap());
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::from_vec(vec![1., 2.]));
    let x = tape.leaf(Tensor::from_vec(vec![3., 4.]));
    let g = tape.backward(c.mul(x).unwrap().sum()).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[1., 2.]);
}

#[test]
fn foreign_tape_vars_are_rejected() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.constant(Tensor::zeros(&[2]));
    let b = t2.constant(Tensor::zeros(&[2]));
    assert!(a.add(b).is_err());
}

#[test]
fn finite_check_mode_reports_first_non_finite_node() {
    let tape = Tape::new();
    tape.set_check_finite(true);
    let x = tape.constant(Tensor::from_vec(vec![-1.0, 1.0]));
    let _ = x.exp();
    assert!(tape.first_non_finite().is_none());
    let bad = x.ln();
    let _ = bad.exp();
    assert_eq!(tape.first_non_finite(), Some((bad.id(), "unary")));
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let logits = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
    let target = 2;
    let ce = |t: &Tensor| {
        let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + t.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - t.data()[target]
    };
    let numeric = finite_diff_grad(ce, &logits, 1e-5);

    let tape = Tape::new();
    let x = tape.leaf(logits);
    let loss = x.log_softmax(0).unwrap().narrow(0, target, 1).unwrap().sum().neg();
    let g = tape.backward(loss).unwrap();
    for (a, n) in g.get(x).unwrap().data().iter().zip(numeric.data()) {
        assert!(relative_error(*a, *n) < 1e-6, "{a} vs {n}");
    }
}

#[test]
fn concat_narrow_select_round_trip() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
    let b = tape.constant(Tensor::new(&[2, 1], vec![5., 6.]).unwrap());
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(c.value().data(), &[1., 2., 5., 3., 4., 6.]);
    assert_eq!(c.narrow(1, 2, 1).unwrap().value().data(), &[5., 6.]);
    assert_eq!(
        c.index_select(0, &[1, 1, 0]).unwrap().value().data(),
        &[3., 4., 6., 3., 4., 6., 1., 2., 5.]
    );
    assert!(c.narrow(1, 2, 2).is_err());
}
