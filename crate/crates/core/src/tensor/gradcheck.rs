use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

fn eval_at<T, F>(f: &F, point: Tensor<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point);
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check evaluation".into()));
    }
    Ok(v)
}

/// Compare reverse-mode gradients of `f` at `point` against central
/// differences with step `eps`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::Contract("grad_check eps must be positive".into()));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    g.check_finite(y, "grad_check forward")?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    if !analytic.all_finite() {
        return Err(Error::NonFinite("grad_check analytic gradient".into()));
    }

    let two = T::lit(2.0);
    let mut worst = T::zero();
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + eps;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - eps;
        let numeric = (eval_at(&f, plus)? - eval_at(&f, minus)?) / (two * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}
