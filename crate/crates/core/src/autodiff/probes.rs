//! Randomized scalar probes around every tape op, for finite-difference checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, BatchNormMode, Tape, Tensor, Var};

pub const OP_NAMES: [&str; 20] = [
    "matmul",
    "add",
    "add_bias",
    "scale",
    "transpose",
    "relu",
    "softmax",
    "log_softmax",
    "mean",
    "ln",
    "sum_squares",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "batchnorm_train",
    "batchnorm_eval",
    "layernorm",
    "attention",
    "mul_const",
];

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).expect("shape matches data")
}

/// Scalar-valued function of the probe inputs.
pub type Probe = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>>;

/// Random inputs and a scalar probe around op number `op` (see [`OP_NAMES`]).
pub fn op_probe(op: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Probe) {
    let m = rng.random_range(1..5);
    let n = rng.random_range(2..5);
    let k = rng.random_range(1..5);
    // Weighted sum makes every output coordinate matter with a distinct sensitivity.
    let reduce = |t: &mut Tape<f64>, v: Var| -> Result<Var, AutodiffError> {
        let mut w = t.value(v).clone();
        for (i, x) in w.data_mut().iter_mut().enumerate() {
            *x = 0.3 + 0.17 * (i % 7) as f64;
        }
        let p = t.mul_const(v, &w)?;
        Ok(t.sum(p))
    };
    match op {
        0 => (
            vec![random(rng, &[m, k]), random(rng, &[k, n])],
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                reduce(t, y)
            }),
        ),
        1 => (
            vec![random(rng, &[m, n]), random(rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.add(v[0], v[1])?;
                reduce(t, y)
            }),
        ),
        2 => (
            vec![random(rng, &[m, n]), random(rng, &[n])],
            Box::new(move |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                reduce(t, y)
            }),
        ),
        3 => (
            vec![random(rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.scale(v[0], -1.7);
                reduce(t, y)
            }),
        ),
        4 => (
            vec![random(rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.transpose(v[0])?;
                reduce(t, y)
            }),
        ),
        5 => {
            // Keep inputs away from the kink so central differences are valid.
            let x = random(rng, &[m, n]).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
            (
                vec![x],
                Box::new(move |t, v| {
                    let y = t.relu(v[0]);
                    reduce(t, y)
                }),
            )
        }
        6 => {
            let axis = rng.random_range(0..2);
            (
                vec![random(rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.softmax(v[0], axis)?;
                    reduce(t, y)
                }),
            )
        }
        7 => {
            let axis = rng.random_range(0..2);
            (
                vec![random(rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.log_softmax(v[0], axis)?;
                    reduce(t, y)
                }),
            )
        }
        8 => {
            let axis = rng.random_range(0..2);
            (
                vec![random(rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.mean(v[0], axis)?;
                    reduce(t, y)
                }),
            )
        }
        9 => (
            vec![random(rng, &[m, n]).map(|v| v.abs() + 0.5)],
            Box::new(move |t, v| {
                let y = t.ln(v[0]);
                reduce(t, y)
            }),
        ),
        10 => (
            vec![random(rng, &[m, n])],
            Box::new(move |t, v| Ok(t.sum_squares(v[0]))),
        ),
        11 => (
            vec![random(rng, &[m + 2, n])],
            Box::new(move |t, v| {
                let y = t.slice_rows(v[0], 1, m)?;
                reduce(t, y)
            }),
        ),
        12 => (
            vec![random(rng, &[m, n + 2])],
            Box::new(move |t, v| {
                let y = t.slice_cols(v[0], 1, n)?;
                reduce(t, y)
            }),
        ),
        13 => (
            vec![random(rng, &[m, n]), random(rng, &[k, n])],
            Box::new(move |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                reduce(t, y)
            }),
        ),
        14 => (
            vec![random(rng, &[m, n]), random(rng, &[m, k])],
            Box::new(move |t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                reduce(t, y)
            }),
        ),
        15 => (
            vec![random(rng, &[m + 2, n]), random(rng, &[n]), random(rng, &[n])],
            Box::new(move |t, v| {
                let y = t.batchnorm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?;
                reduce(t, y)
            }),
        ),
        16 => {
            let rm: Vec<f64> = (0..n).map(|i| 0.1 * i as f64).collect();
            let rv: Vec<f64> = (0..n).map(|i| 0.5 + 0.2 * i as f64).collect();
            (
                vec![random(rng, &[m, n]), random(rng, &[n]), random(rng, &[n])],
                Box::new(move |t, v| {
                    let y = t.batchnorm(
                        v[0],
                        v[1],
                        v[2],
                        BatchNormMode::Eval {
                            running_mean: &rm,
                            running_var: &rv,
                            eps: 1e-5,
                        },
                    )?;
                    reduce(t, y)
                }),
            )
        }
        17 => (
            vec![random(rng, &[m, n + 1]), random(rng, &[n + 1]), random(rng, &[n + 1])],
            Box::new(move |t, v| {
                let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
                reduce(t, y)
            }),
        ),
        18 => (
            vec![random(rng, &[m, k]), random(rng, &[n, k]), random(rng, &[n, m + 1])],
            Box::new(move |t, v| {
                let y = t.scaled_dot_product_attention(v[0], v[1], v[2])?;
                reduce(t, y)
            }),
        ),
        19 => {
            let c = random(rng, &[m, n]);
            (
                vec![random(rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.mul_const(v[0], &c)?;
                    reduce(t, y)
                }),
            )
        }
        _ => panic!("no probe for op {op}"),
    }
}
