//! Trainable parameters and SGD with momentum.

use crate::tensor::{Scalar, Tensor};

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Param { value, grad, velocity }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// `v ← momentum·v + grad + weight_decay·w`, `w ← w − lr·v`, then zero the gradient.
pub fn sgd_momentum_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Param<T>>,
    lr: T,
    momentum: T,
    weight_decay: T,
) {
    for p in params {
        let Param { value, grad, velocity } = p;
        for ((w, g), v) in value.data_mut().iter_mut().zip(grad.data_mut()).zip(velocity.data_mut()) {
            *v = momentum * *v + *g + weight_decay * *w;
            *w -= lr * *v;
            *g = T::zero();
        }
    }
}

/// Cosine annealing from `initial` at epoch 0 towards 0 at `total_epochs`.
pub fn cosine_lr(initial: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return initial;
    }
    let progress = epoch as f64 / total_epochs as f64;
    0.5 * initial * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Param<f64> {
        Param::new(Tensor::new(vec![values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn plain_step_subtracts_lr_times_grad() {
        let mut p = param(&[1.0, -2.0]);
        p.grad.data_mut().copy_from_slice(&[0.5, 0.25]);
        sgd_momentum_step([&mut p], 0.1, 0.0, 0.0);
        assert_eq!(p.value.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        let mut p = param(&[3.0, 4.0]);
        for _ in 0..5 {
            sgd_momentum_step([&mut p], 0.5, 0.0, 0.0);
        }
        assert_eq!(p.value.data(), &[3.0, 4.0]);
    }

    #[test]
    fn two_momentum_steps_match_hand_recurrence() {
        let (lr, mu, wd) = (0.05, 0.9, 1e-3);
        let grads = [[0.3, -0.7], [0.1, 0.4]];
        let mut p = param(&[1.0, 2.0]);
        let (mut w, mut v) = ([1.0f64, 2.0], [0.0f64; 2]);
        for g in grads {
            p.grad.data_mut().copy_from_slice(&g);
            sgd_momentum_step([&mut p], lr, mu, wd);
            for i in 0..2 {
                v[i] = mu * v[i] + g[i] + wd * w[i];
                w[i] -= lr * v[i];
            }
        }
        assert_eq!(p.value.data(), &w);
        assert_eq!(p.velocity.data(), &v);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.05, 0, 10), 0.05);
        assert!((cosine_lr(0.05, 5, 10) - 0.025).abs() < 1e-15);
        assert!(cosine_lr(0.05, 10, 10).abs() < 1e-15);
    }
}
