//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update of every parameter; `grads` follows parameter order.
pub fn adam_step<T: Element>(
    params: &mut ParameterSet<T>,
    grads: &[Tensor<T>],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.adam.m.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{}` has shape {:?}, Adam state has {:?}",
                p.name,
                g.shape(),
                p.adam.m.shape()
            )));
        }
    }
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let eps = T::from_f64(cfg.eps);
    for (p, g) in params.iter_mut().zip(grads) {
        p.adam.step += 1;
        let t = p.adam.step as i32;
        let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64(lr);
        let values = p.value.data_mut();
        let m = p.adam.m.data_mut();
        let v = p.adam.v.data_mut();
        for (((x, mi), vi), &gi) in values.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::from_vec(&[3], vec![value; 3]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.3);
        adam_step(&mut p, &[Tensor::zeros(&[3])], 0.01, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[0.3; 3]);
        assert_eq!(p.iter().next().unwrap().adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+ε).
        let mut p = single(1.0);
        let g = Tensor::from_vec(&[3], vec![0.5, -2.0, 1e-3]).unwrap();
        adam_step(&mut p, &[g], 0.01, &AdamConfig::default()).unwrap();
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 0.99).abs() < 1e-9);
        assert!((x[1] - 1.01).abs() < 1e-9);
        assert!((x[2] - (1.0 - 0.01 * 1e-3 / (1e-3 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn repeated_gradient_moves_monotonically() {
        let mut p = single(0.0);
        let g = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let mut prev = 0.0;
        for _ in 0..2 {
            adam_step(&mut p, std::slice::from_ref(&g), 0.1, &AdamConfig::default()).unwrap();
            let x = p.get("x").unwrap().data()[0];
            assert!(x < prev);
            prev = x;
        }
        assert!((prev + 0.2).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = single(0.0);
        let cfg = AdamConfig::default();
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], 0.0, &cfg).is_err());
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], 0.1, &cfg).is_err());
        assert!(adam_step(&mut p, &[], 0.1, &cfg).is_err());
    }
}
