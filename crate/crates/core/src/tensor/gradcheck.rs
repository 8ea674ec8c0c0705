//! Central-difference gradient checking.

use super::{precision, Precision, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// a central difference with step `h`.
///
/// Per coordinate the error is `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
/// Requires 64-bit precision, `h` in `[1e-6, 1e-3]` and a one-element output.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if precision() != Precision::F64 {
        return Err(Error::contract("grad_check requires 64-bit precision"));
    }
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::contract(format!(
            "grad_check step {h} outside [1e-6, 1e-3]"
        )));
    }

    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(input)?;
    if out.value().numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    let analytic = tape.backward(out)?.wrt(input);

    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::no_grad();
        f(tape.leaf(point))?.value().item()
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
