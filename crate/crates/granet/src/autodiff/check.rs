//! Finite-difference gradient checking.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Vec<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.values_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.values_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// max over coordinates of |analytic - numeric| / max(1, |numeric|).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the reverse-mode gradient of `f` at `x` against central finite
/// differences and returns the maximum relative error over coordinates.
///
/// `f` must produce a scalar and be deterministic; it is re-evaluated twice
/// per coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xid = tape.param(x.clone());
    let loss = f(&mut tape, xid)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check requires a scalar output, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(xid)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let numeric = numeric_grad(
        |probe| {
            let mut tape = Tape::new();
            let id = tape.constant(probe.clone());
            let out = f(&mut tape, id).expect("forward pass failed during finite differences");
            tape.value(out).item()
        },
        x,
        eps,
    );
    Ok(max_rel_error(&analytic, &numeric))
}
