use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::probes::{op_probe, OP_NAMES};
use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn vec1(values: &[f64]) -> Tensor<f64> {
    Tensor::vector(values.to_vec()).unwrap()
}

#[test]
fn relu_example() {
    let mut tape = Tape::new();
    let x = tape.constant(vec1(&[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn softmax_symmetric_pair() {
    let mut tape = Tape::new();
    let x = tape.constant(vec1(&[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn single_key_attention_returns_value() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let k = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let v = tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
    let out = tape.scaled_dot_product_attention(q, k, v).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0]);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    assert_eq!(
        tape.softmax(a, 2).unwrap_err(),
        AutodiffError::InvalidAxis { axis: 2, rank: 2 }
    );
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2, 3], 0.7));
    let loss = tape.sum(x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn relu_subgradient() {
    let mut tape = Tape::new();
    let x = tape.param(vec1(&[-1.0, 2.0]));
    let r = tape.relu(x);
    let loss = tape.sum(r);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(vec1(&[0.0]));
    let r = tape.relu(x);
    let loss = tape.sum(r);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(vec1(&[1.0, 2.0]));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(AutodiffError::NonScalarLoss { .. })));
}

#[test]
fn unreachable_leaf_gets_zero_grad_and_is_flagged() {
    let mut tape = Tape::new();
    let x = tape.param(vec1(&[1.0, 2.0]));
    let unused = tape.param(vec1(&[3.0]));
    let loss = tape.sum_squares(x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0]);
    assert_eq!(grads.disconnected(), &[unused]);
}

#[test]
fn nan_forward_is_reported_by_backward() {
    let mut tape = Tape::new();
    let x = tape.param(vec1(&[-1.0]));
    let y = tape.ln(x);
    let loss = tape.sum(y);
    assert!(matches!(
        tape.backward(loss),
        Err(AutodiffError::NonFinite { op: "ln", .. })
    ));
}

#[test]
fn sum_of_squares_gradcheck_is_exact() {
    let x = vec1(&[1.0, 2.0]);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let loss = tape.sum_squares(v);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0]);
    let err = finite_difference_check(|t, v| Ok(t.sum_squares(v)), &x, 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn constant_function_gradcheck_is_zero() {
    let x = vec1(&[0.3, -0.2, 4.0]);
    let err = finite_difference_check(|t, _v| Ok(t.constant(Tensor::scalar(2.5))), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn softmax_matmul_composition_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 4]);
    let w = random(&mut rng, &[4, 5]);
    let c = random(&mut rng, &[3, 5]);
    let err = finite_difference_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let h = t.matmul(v, wv)?;
            let s = t.softmax(h, 1)?;
            let m = t.mul_const(s, &c)?;
            Ok(t.sum(m))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn three_layer_composition_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[3, 5]),
        random(&mut rng, &[5]),
        random(&mut rng, &[5, 4]),
        random(&mut rng, &[4, 2]),
    ];
    let report = finite_difference_check_many(
        |t, v| {
            let h1 = t.matmul(v[0], v[1])?;
            let h1 = t.add_bias(h1, v[2])?;
            let a1 = t.relu(h1);
            let h2 = t.matmul(a1, v[3])?;
            let s = t.softmax(h2, 1)?;
            let h3 = t.matmul(s, v[4])?;
            Ok(t.sum_squares(h3))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn every_op_passes_gradcheck_over_twenty_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for op in 0..OP_NAMES.len() {
            let (inputs, f) = op_probe(op, &mut rng);
            let report = finite_difference_check_many(|t, v| f(t, v), &inputs, 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-4, "op {op} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = random(&mut rng, &[4, 7]).map(|v| v * 10.0);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1).unwrap();
        for r in 0..4 {
            let total: f64 = tape.value(s).row(r).iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn attention_with_identity_values_is_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 5;
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let mut tape = Tape::new();
    let q = tape.constant(random(&mut rng, &[3, 4]));
    let k = tape.constant(random(&mut rng, &[n, 4]));
    let v = tape.constant(Tensor::matrix(n, n, eye).unwrap());
    let out = tape.scaled_dot_product_attention(q, k, v).unwrap();
    for r in 0..3 {
        let row = tape.value(out).row(r);
        assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn eval_batchnorm_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[3, 4]);
    let gamma = random(&mut rng, &[4]);
    // Shift is zero when running mean and beta vanish, so doubling must be exact.
    let beta = Tensor::zeros(&[4]);
    let mean = vec![0.0; 4];
    let var: Vec<f64> = vec![0.25, 1.0, 4.0, 0.5];
    let run = |input: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(input.clone());
        let g = tape.constant(gamma.clone());
        let b = tape.constant(beta.clone());
        let y = tape
            .batchnorm(
                xv,
                g,
                b,
                BatchNormMode::Eval {
                    running_mean: &mean,
                    running_var: &var,
                    eps: 1e-5,
                },
            )
            .unwrap();
        tape.value(y).clone()
    };
    let once = run(&x);
    let twice = run(&x.map(|v| 2.0 * v));
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let q = tape.param(random(&mut rng, &[4, 6]));
        let k = tape.param(random(&mut rng, &[5, 6]));
        let v = tape.param(random(&mut rng, &[5, 3]));
        let a = tape.scaled_dot_product_attention(q, k, v).unwrap();
        let loss = tape.sum_squares(a);
        let value = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        (value, grads.get(q).unwrap().clone())
    };
    let (l1, g1) = build();
    let (l2, g2) = build();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn tape_dump_lists_every_node() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::zeros(&[2, 2]));
    let b = tape.relu(a);
    let _ = tape.sum(b);
    let dump = tape.dump();
    assert_eq!(dump.lines().count(), 3);
    assert!(dump.contains("%1 = relu(%0) [2, 2] grad"));
}

#[test]
fn f32_tape_runs() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::vector(vec![1.0f32, -2.0]).unwrap());
    let loss = tape.sum_squares(x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0f32, -4.0]);
}
