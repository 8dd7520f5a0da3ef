use proptest::prelude::*;
use sparsepo_tensor::{no_grad, primitive_gradient_suite, Tensor};

#[test]
fn every_primitive_matches_finite_differences_over_20_seeds() {
    for seed in 0..20 {
        for (name, report) in primitive_gradient_suite(seed, 1e-6, 1e-4).unwrap() {
            assert!(report.passed(), "seed {seed} primitive {name}: {report:?}");
        }
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let x = Tensor::param((0..12).map(|i| (i as f64 * 0.7).sin()).collect(), &[3, 4]).unwrap();
        let w = Tensor::param((0..8).map(|i| (i as f64 * 0.3).cos()).collect(), &[4, 2]).unwrap();
        let y = x.matmul(&w).unwrap().log_softmax(1).unwrap().sum();
        y.backward().unwrap();
        (y.item().to_bits(), x.grad().unwrap(), w.grad().unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn log_softmax_rows_normalize(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let x = Tensor::new(vals, &[3, 4]).unwrap();
        let y = no_grad(|| x.log_softmax(1).unwrap());
        for row in y.to_vec().chunks(4) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            prop_assert!(lse.abs() <= 1e-12);
        }
    }

    #[test]
    fn clamp_is_identity_inside_range(vals in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let x = Tensor::from_vec(vals.clone());
        prop_assert_eq!(x.clamp(-1.0, 1.0).to_vec(), vals);
    }
}
