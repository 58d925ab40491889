use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of a scalar function.
pub fn central_difference<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::Precondition("gradient check needs a scalar function".into()))
    };
    (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            Ok((eval(plus)? - eval(minus)?) / (2.0 * eps))
        })
        .collect()
}

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// a central-difference estimate with step `eps`, measured per coordinate as
/// `|a - c| / (|a| + |c| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).expect("leaf requires grad").to_vec();
    let numeric = central_difference(&f, x, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, c)| (a - c).abs() / (a.abs() + c.abs() + 1e-12))
        .fold(0.0, f64::max))
}
