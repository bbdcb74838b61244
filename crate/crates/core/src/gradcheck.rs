//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar-valued function recorded on a fresh graph for each evaluation.
pub trait TapeFn: Fn(&Graph, Var) -> Result<Var> {}
impl<F: Fn(&Graph, Var) -> Result<Var>> TapeFn for F {}

fn eval(f: &impl TapeFn, x: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let v = g.leaf(x.clone(), false);
    let out = g.tensor(f(&g, v)?);
    if out.len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Gradient of `f` at `x` from one backward sweep.
pub fn analytic_gradient(f: &impl TapeFn, x: &Tensor) -> Result<(f64, Tensor)> {
    let g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&g, v)?;
    g.backward(out)?;
    let value = g.tensor(out).item();
    Ok((value, g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape()))))
}

/// Max over coordinates of `|analytic - central| / max(1, |analytic|)`.
pub fn finite_diff_check(f: impl TapeFn, x: &Tensor, step: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_coords(f, x, step, &coords)
}

/// As [`finite_diff_check`] but restricted to the flat indices in `coords`.
pub fn finite_diff_check_coords(
    f: impl TapeFn,
    x: &Tensor,
    step: f64,
    coords: &[usize],
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (value, grad) = analytic_gradient(&f, x)?;
    let again = eval(&f, x)?;
    if value.to_bits() != again.to_bits() {
        return Err(Error::contract(format!(
            "function is not deterministic: {value} then {again} at the same point"
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grad.data()[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite-difference error at coordinate {i}"
            )));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Backend;
    use std::cell::Cell;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 0.7, 0.0, 5.0]).unwrap();
        let err = finite_diff_check(|g: &Graph, v| Ok(g.sum(&v)), &x, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.05]).unwrap();
        let err = finite_diff_check(|g: &Graph, v| Ok(g.sum(&g.sigmoid(&v))), &x, 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nondeterminism_is_detected() {
        let calls = Cell::new(0.0);
        let f = |g: &Graph, v: Var| {
            calls.set(calls.get() + 1.0);
            let s = g.sum(&v);
            Ok(g.add_scalar(&s, calls.get()))
        };
        let err = finite_diff_check(f, &Tensor::ones(&[2]), 1e-4).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let r = finite_diff_check(|g: &Graph, v| Ok(g.sum(&v)), &Tensor::ones(&[1]), 0.0);
        assert!(r.is_err());
    }
}
