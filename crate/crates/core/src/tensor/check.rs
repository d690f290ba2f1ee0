//! Finite-difference verification of recorded gradients.

use super::{Graph, Result, Tensor, TensorError};
use crate::scalar::{lit, Scalar};

fn eval<T: Scalar, F>(f: &F, shape: &[usize], x: Vec<T>) -> Result<T>
where
    F: for<'g> Fn(&'g Graph<T>, Tensor<'g, T>) -> Result<Tensor<'g, T>>,
{
    let g = Graph::new();
    let xt = g.constant(shape, x)?;
    let y = f(&g, xt)?;
    if y.numel() != 1 {
        return Err(TensorError::NonScalarRoot(y.shape()));
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Returns `max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12)`
/// where `numeric` uses central differences with step `eps`.
pub fn grad_check<T: Scalar, F>(f: F, shape: &[usize], x: &[T], eps: T) -> Result<T>
where
    F: for<'g> Fn(&'g Graph<T>, Tensor<'g, T>) -> Result<Tensor<'g, T>>,
{
    if !(eps > T::zero() && eps <= lit(1e-3)) {
        return Err(super::invalid("grad_check", format!("eps {eps} outside (0, 1e-3]")));
    }
    let g = Graph::new();
    let xt = g.variable(shape, x.to_vec())?;
    let y = f(&g, xt)?;
    if !y.is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()));
    }
    y.backward()?;
    let analytic = xt.grad().unwrap_or_else(|| vec![T::zero(); x.len()]);
    let mut worst = T::zero();
    let two = lit::<T>(2.0);
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        xp[i] += eps;
        let mut xm = x.to_vec();
        xm[i] -= eps;
        let numeric = (eval(&f, shape, xp)? - eval(&f, shape, xm)?) / (two * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + lit(1e-12));
        worst = worst.max(err);
    }
    Ok(worst)
}
