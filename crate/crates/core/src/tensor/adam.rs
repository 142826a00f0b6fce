//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay rate; each step multiplies decayed weights by `1 − lr·weight_decay`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Matrix]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `decay[i]` selects whether parameter `i` receives
    /// weight decay. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], decay: &[bool]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam_step: {} params, {} grads, {} decay flags, {} moment slots",
                params.len(),
                grads.len(),
                decay.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let shrink = if decay[i] { 1.0 - lr * weight_decay } else { 1.0 };
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((x, g), mi), vi) in p.as_mut_slice().iter_mut().zip(grads[i].as_slice()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x = *x * shrink - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Matrix::from_rows(&[&[1.0, -2.0]])];
        let before = p.clone();
        let mut s = AdamState::new(cfg(1e-3, 0.0), &p);
        for _ in 0..10 {
            s.step(&mut p, &[Matrix::zeros(1, 2)], &[true]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.steps(), 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Matrix::scalar(0.0)];
        let mut s = AdamState::new(cfg(1e-3, 0.0), &p);
        s.step(&mut p, &[Matrix::scalar(1.0)], &[false]).unwrap();
        // m_hat = 1, v_hat = 1  =>  delta = -lr / (1 + eps)
        assert!((p[0].item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = vec![Matrix::row_vector(vec![0.0, 0.0])];
        let mut s = AdamState::new(cfg(1e-2, 0.0), &p);
        for _ in 0..100 {
            s.step(&mut p, &[Matrix::row_vector(vec![0.5, -3.0])], &[false])
                .unwrap();
        }
        assert!(p[0].get(0, 0) < -0.5);
        assert!(p[0].get(0, 1) > 0.5);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut p = vec![Matrix::scalar(2.0), Matrix::scalar(2.0)];
        let mut s = AdamState::new(cfg(0.1, 0.5), &p);
        s.step(&mut p, &[Matrix::scalar(0.0), Matrix::scalar(0.0)], &[true, false])
            .unwrap();
        assert!((p[0].item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(p[1].item(), 2.0);
    }

    #[test]
    fn nan_gradient_aborts_without_touching_params() {
        let mut p = vec![Matrix::scalar(1.0)];
        let mut s = AdamState::new(cfg(1e-3, 0.0), &p);
        let err = s.step(&mut p, &[Matrix::scalar(f64::NAN)], &[false]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(s.steps(), 0);
    }
}
