//! Randomized finite-difference checks for every primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_gradient, GradCheckReport};
use crate::tensor::Tensor;

type Case = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).expect("shape")
}

/// Values bounded away from zero, for kinked primitives.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(v, shape).expect("shape")
}

/// Projects `y` onto a fixed random direction so every output coordinate
/// contributes to the scalar being differentiated.
fn project(y: Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = uniform(&mut rng, y.shape(), -1.0, 1.0);
    Ok(y.mul(&w)?.sum())
}

/// Runs every primitive's gradient check for one seed. Returns one report
/// per primitive, labelled.
pub fn primitive_gradient_suite(seed: u64, step: f64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (3, 4, 5);
    let ids: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
    let gather: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let (lo, hi) = (-0.5, 0.6);
    // keep clamp inputs off the boundaries
    let clamp_in = {
        let raw = uniform(&mut rng, &[m, n], -1.5, 1.5).to_vec();
        let v = raw
            .into_iter()
            .map(|x| if (x - lo).abs() < 0.05 || (x - hi).abs() < 0.05 { x + 0.1 } else { x })
            .collect();
        Tensor::new(v, &[m, n])?
    };

    let cases: Vec<(&'static str, Vec<Tensor>, Case)> = vec![
        (
            "matmul",
            vec![uniform(&mut rng, &[m, k], -1.0, 1.0), uniform(&mut rng, &[k, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].matmul(&v[1])?, seed)),
        ),
        (
            "add",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0), uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].add(&v[1])?, seed)),
        ),
        (
            "sub",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0), uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].sub(&v[1])?, seed)),
        ),
        (
            "mul",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0), uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].mul(&v[1])?, seed)),
        ),
        (
            "div",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0), uniform(&mut rng, &[m, n], 0.5, 2.0)],
            Box::new(move |v| project(v[0].div(&v[1])?, seed)),
        ),
        (
            "scalar_broadcast",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0), uniform(&mut rng, &[], 0.5, 2.0)],
            Box::new(move |v| project(v[0].mul(&v[1])?.add(&v[1])?.div(&v[1])?, seed)),
        ),
        (
            "add_row",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0), uniform(&mut rng, &[n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].add_row(&v[1])?, seed)),
        ),
        ("relu", vec![off_kink(&mut rng, &[m, n])], Box::new(move |v| project(v[0].relu(), seed))),
        (
            "sigmoid",
            vec![uniform(&mut rng, &[m, n], -3.0, 3.0)],
            Box::new(move |v| project(v[0].sigmoid(), seed)),
        ),
        (
            "log_sigmoid",
            vec![uniform(&mut rng, &[m, n], -3.0, 3.0)],
            Box::new(move |v| project(v[0].log_sigmoid(), seed)),
        ),
        (
            "exp",
            vec![uniform(&mut rng, &[m, n], -2.0, 2.0)],
            Box::new(move |v| project(v[0].exp(), seed)),
        ),
        (
            "ln",
            vec![uniform(&mut rng, &[m, n], 0.2, 3.0)],
            Box::new(move |v| project(v[0].ln(), seed)),
        ),
        (
            "neg_scale_shift",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].neg().scale(1.7).add_scalar(0.3), seed)),
        ),
        (
            "log_softmax_axis1",
            vec![uniform(&mut rng, &[m, n], -2.0, 2.0)],
            Box::new(move |v| project(v[0].log_softmax(1)?, seed)),
        ),
        (
            "log_softmax_axis0",
            vec![uniform(&mut rng, &[m, n], -2.0, 2.0)],
            Box::new(move |v| project(v[0].log_softmax(0)?, seed)),
        ),
        (
            "softmax",
            vec![uniform(&mut rng, &[m, n], -2.0, 2.0)],
            Box::new(move |v| project(v[0].softmax(1)?, seed)),
        ),
        (
            "layer_norm",
            vec![
                uniform(&mut rng, &[m, n], -2.0, 2.0),
                uniform(&mut rng, &[n], 0.5, 1.5),
                uniform(&mut rng, &[n], -0.5, 0.5),
            ],
            Box::new(move |v| project(v[0].layer_norm(&v[1], &v[2], 1e-5)?, seed)),
        ),
        (
            "embedding",
            vec![uniform(&mut rng, &[6, k], -1.0, 1.0)],
            Box::new(move |v| project(Tensor::embedding(&v[0], &ids)?, seed)),
        ),
        (
            "concat_axis0",
            vec![uniform(&mut rng, &[2, n], -1.0, 1.0), uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(Tensor::concat(&[v[0].clone(), v[1].clone()], 0)?, seed)),
        ),
        (
            "concat_axis1",
            vec![uniform(&mut rng, &[m, 2], -1.0, 1.0), uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(Tensor::concat(&[v[0].clone(), v[1].clone()], 1)?, seed)),
        ),
        (
            "sum",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| Ok(v[0].exp().sum())),
        ),
        (
            "sum_axis",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].sum_axis(0)?, seed)),
        ),
        (
            "mean_axis",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].mean_axis(1)?, seed)),
        ),
        (
            "var_axis",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].var_axis(1)?, seed)),
        ),
        ("clamp", vec![clamp_in], Box::new(move |v| project(v[0].clamp(lo, hi), seed))),
        (
            // the stopped operand is not an input: finite differences cannot
            // see through stop_gradient by construction
            "stop_gradient",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0)],
            {
                let held = uniform(&mut rng, &[m, n], -1.0, 1.0);
                Box::new(move |v| project(held.stop_gradient().mul(&v[0])?, seed))
            },
        ),
        (
            "reshape_transpose",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].reshape(&[n, m])?.transpose()?, seed)),
        ),
        (
            "slice_rows_cols",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].slice_rows(1, 3)?.slice_cols(1, 4)?, seed)),
        ),
        (
            "gather_rows",
            vec![uniform(&mut rng, &[m, n], -1.0, 1.0)],
            Box::new(move |v| project(v[0].gather_rows(&gather)?, seed)),
        ),
    ];

    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check_gradient(f, &inputs, step, tol)?)))
        .collect()
}
