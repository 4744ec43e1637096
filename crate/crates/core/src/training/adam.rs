//! Adaptive-moment optimiser with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

pub fn adam_update<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(
            "adam_update",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam_update",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::from_fn(&[3], |i| i as f64)];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_update(&mut p, &[Tensor::zeros(&[3])], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_update(&mut p, &[Tensor::scalar(1.0)], &mut s, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn trajectories_repeat_and_shapes_checked() {
        let run = || {
            let mut p = vec![Tensor::<f32>::from_fn(&[4], |i| i as f32)];
            let mut s = AdamState::new(&p);
            for k in 0..5 {
                let g = Tensor::from_fn(&[4], |i| (i + k) as f32 * 0.3 - 0.5);
                adam_update(&mut p, &[g], &mut s, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut s = AdamState::new(&p);
        assert!(adam_update(&mut p, &[Tensor::zeros(&[3])], &mut s, &AdamConfig::default()).is_err());
    }
}
