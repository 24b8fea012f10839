//! Momentum SGD over named parameters.

use crate::error::{Error, Result};
use crate::network::Param;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v <- momentum * v + grad; value <- value - lr * v`, in the order the
    /// parameters are given. The order must be the same on every call.
    pub fn step(&mut self, params: &mut [(String, &mut Param)]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad.all_finite()) {
            return Err(Error::Training(format!("non-finite gradient in {name}")));
        }
        for ((_, param), vel) in params.iter_mut().zip(&mut self.velocity) {
            for ((v, g), w) in vel
                .data_mut()
                .iter_mut()
                .zip(param.grad.data())
                .zip(param.value.data_mut())
            {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
        Ok(())
    }
}

/// One plain step of [`Sgd`] with a fresh velocity.
pub fn sgd_step(params: &mut [(String, &mut Param)], lr: f64, momentum: f64) -> Result<()> {
    Sgd::new(lr, momentum).step(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64, grad: f64) -> Param {
        let mut p = Param::new(Tensor::scalar(value));
        p.grad = Tensor::scalar(grad);
        p
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut p = scalar_param(1.5, 0.0);
        sgd_step(&mut [("w".into(), &mut p)], 0.1, 0.9).unwrap();
        assert_eq!(p.value.data(), &[1.5]);
    }

    #[test]
    fn single_step() {
        let mut p = scalar_param(1.0, 1.0);
        sgd_step(&mut [("w".into(), &mut p)], 0.1, 0.0).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut opt = Sgd::new(0.1, 0.9);
        let mut p = scalar_param(2.0, 0.5);
        opt.step(&mut [("w".into(), &mut p)]).unwrap();
        p.grad = Tensor::scalar(-0.25);
        opt.step(&mut [("w".into(), &mut p)]).unwrap();
        // v1 = 0.5, w1 = 2 - 0.05; v2 = 0.45 - 0.25 = 0.2, w2 = w1 - 0.02
        let expected = 2.0 - 0.1 * 0.5 - 0.1 * (0.9 * 0.5 - 0.25);
        assert!((p.value.data()[0] - expected).abs() <= 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_param(0.0, f64::NAN);
        let err = sgd_step(&mut [("layer3.bias".into(), &mut p)], 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains("layer3.bias")));
    }
}
