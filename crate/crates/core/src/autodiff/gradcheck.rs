//! Central finite-difference gradient checking.

use super::{Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h` at every coordinate.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor, step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Gradient of `f` at `x` via one backward pass.
pub fn analytic_grad<F, E>(f: &F, x: &Tensor) -> Result<Tensor, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    Ok(tape.grad_or_zeros(xv))
}

fn eval<F, E>(f: &F, x: &Tensor) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let v = tape.value(y);
    if !v.is_scalar() {
        return Err(TensorError::NotScalar(v.shape().to_vec()).into());
    }
    Ok(v.item())
}
