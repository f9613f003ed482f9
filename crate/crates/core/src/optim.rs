//! Adam optimizer over a fixed list of matrices.

use crate::numerics::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam state for a list of parameters with fixed shapes.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a Matrix<T>>) -> Self {
        let first: Vec<Matrix<T>> = shapes.into_iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update; `params` and `grads` are matched by position.
    pub fn update(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), self.first.len());
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let correction1 = T::one() - T::lit(c.beta1.powi(self.step));
        let correction2 = T::one() - T::lit(c.beta2.powi(self.step));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            debug_assert_eq!(param.shape(), grad.shape());
            let iter = param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (mi, vi)) in iter {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / correction1;
                let v_hat = *vi / correction2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr·sign(g) (up to eps).
        let mut p = Matrix::from_vec(1, 2, vec![1.0f64, -1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), [&p]);
        let g = Matrix::from_vec(1, 2, vec![3.0, -0.5]).unwrap();
        adam.update(&mut [&mut p], &[g]);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Matrix::from_vec(1, 2, vec![0.25f32, 4.0]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.0), [&p]);
        for _ in 0..5 {
            adam.update(&mut [&mut p], &[Matrix::filled(1, 2, 1.0)]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Matrix::from_vec(1, 1, vec![5.0f64]).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), [&p]);
        for _ in 0..500 {
            let g = p.scale(2.0);
            adam.update(&mut [&mut p], &[g]);
        }
        assert!(p.get(0, 0).abs() < 1e-2);
    }
}
