//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_relative_error: f64,
    /// (input index, flat coordinate) where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let v = f(&tape, &vars)?.item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!(
            "function value {v} is not finite"
        )))
    }
}

/// Checks the gradient of a scalar function of several tensors.
///
/// `f` builds the computation on the given tape and returns the scalar output.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.item()?.is_finite() {
        return Err(Error::Numerical("function value is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(v)).collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut perturbed = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let x0 = input.data()[i];
            perturbed[which].data_mut()[i] = x0 + eps;
            let plus = eval(&f, &perturbed)?;
            perturbed[which].data_mut()[i] = x0 - eps;
            let minus = eval(&f, &perturbed)?;
            perturbed[which].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[which].data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = err;
                report.worst = (which, i);
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
        .map(|r| r.max_relative_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        // Integer entries and a power-of-two step keep every sum exact.
        let x = Tensor::new(&[2, 3], vec![3.0, -1.0, 4.0, 2.0, -7.0, 1.0]).unwrap();
        assert_eq!(grad_check(|_, v| v.sum(), &x, 2f64.powi(-13)).unwrap(), 0.0);
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 4.0, 2.5, -0.7, 1.1]).unwrap();
        let err = grad_check(|_, v| v.sum(), &x, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_finite_is_numerical_error() {
        let x = Tensor::new(&[1], vec![800.0]).unwrap();
        let r = grad_check(|_, v| v.exp()?.sum(), &x, 1e-4);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
