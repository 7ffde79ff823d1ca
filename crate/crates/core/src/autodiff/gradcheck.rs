//! Central finite-difference verification of tape gradients (double precision).

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::GradCheck(format!("function output has shape {:?}, expected scalar", v.shape())));
    }
    Ok(v.item())
}

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// `f` receives a fresh tape and the input variable and must return a scalar.
/// A function whose value differs between two evaluations at `x` is reported
/// as a failure.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let first = eval(&f, x)?;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is non-deterministic: {first} vs {second}"
        )));
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::GradCheck(format!("non-finite error at coordinate {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
