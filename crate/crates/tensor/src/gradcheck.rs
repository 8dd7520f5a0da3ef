//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::tensor::{no_grad, Tensor};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error at this scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckFailure {
    pub input: usize,
    pub index: usize,
    pub value_plus: f64,
    pub value_minus: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub tolerance: f64,
    pub non_finite: Option<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.max_relative_error <= self.tolerance
    }
}

/// Compares the autodiff gradient of scalar `f` at `inputs` with central
/// differences of width `2·step`, coordinate by coordinate.
///
/// `inputs` are used for their values only; fresh trainable leaves are built
/// for the analytic pass.
pub fn check_gradient<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::Invalid {
            op: "check_gradient",
            msg: format!("step must be positive, got {step}"),
        });
    }
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.deep_copy(true)).collect();
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        tolerance: tol,
        non_finite: None,
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(Tensor::to_vec).collect();
    let eval = |which: usize, index: usize, delta: f64| -> Result<f64> {
        no_grad(|| {
            let shifted: Vec<Tensor> = base
                .iter()
                .zip(inputs)
                .enumerate()
                .map(|(i, (vals, t))| {
                    let mut v = vals.clone();
                    if i == which {
                        v[index] += delta;
                    }
                    Tensor::new(v, t.shape())
                })
                .collect::<Result<_>>()?;
            Ok(f(&shifted)?.item())
        })
    };
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let plus = eval(i, j, step)?;
            let minus = eval(i, j, -step)?;
            report.coordinates += 1;
            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite = Some(GradCheckFailure {
                    input: i,
                    index: j,
                    value_plus: plus,
                    value_minus: minus,
                });
                return Ok(report);
            }
            let n = (plus - minus) / (2.0 * step);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_sum_passes() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let r = check_gradient(|v| Ok(v[0].exp().sum()), &[x], 1e-6, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.coordinates, 2);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // stop_gradient hides the x-dependence of the second factor
        let x = Tensor::from_vec(vec![0.5, 1.5]);
        let r = check_gradient(|v| Ok(v[0].mul(&v[0].stop_gradient())?.sum()), &[x], 1e-6, 1e-4).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_values_reported_with_coordinate() {
        let x = Tensor::from_vec(vec![1.0, 5e-7]);
        let r = check_gradient(|v| Ok(v[0].ln().sum()), &[x], 1e-6, 1e-4).unwrap();
        assert!(!r.passed());
        let fail = r.non_finite.unwrap();
        assert_eq!((fail.input, fail.index), (0, 1));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(check_gradient(|v| Ok(v[0].sum()), &[x], 0.0, 1e-4).is_err());
    }
}
