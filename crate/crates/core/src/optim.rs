//! SGD with momentum and the learning-rate schedules used by both training stages.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One parameter update request for [`Sgd::step`].
pub struct ParamUpdate<'a, T> {
    pub name: &'a str,
    pub param: &'a mut Tensor<T>,
    pub grad: &'a [T],
    /// Per-element multiplier applied to both the gradient and the momentum
    /// buffer. `None` means ungated.
    pub gate: Option<&'a [T]>,
}

/// Momentum SGD: `v <- gate * (m v + g)`, `w <- w - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub momentum: T,
    buffers: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Self { momentum, buffers: BTreeMap::new() }
    }

    pub fn buffer(&self, name: &str) -> Option<&[T]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    /// Applies one step to every parameter. All gradients are validated first
    /// so a non-finite value leaves every parameter untouched.
    pub fn step(&mut self, updates: &mut [ParamUpdate<'_, T>], lr: T) -> Result<()> {
        for u in updates.iter() {
            if u.grad.len() != u.param.numel() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("gradient of length {} for `{}` {:?}", u.grad.len(), u.name, u.param.shape()),
                ));
            }
            if let Some(g) = u.gate {
                if g.len() != u.grad.len() {
                    return Err(Error::shape("sgd_step", format!("gate length mismatch for `{}`", u.name)));
                }
            }
            if u.grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(u.name.to_string()));
            }
        }
        let m = self.momentum;
        for u in updates.iter_mut() {
            let buf = self
                .buffers
                .entry(u.name.to_string())
                .or_insert_with(|| vec![T::zero(); u.grad.len()]);
            let w = u.param.data_mut();
            match u.gate {
                Some(gate) => {
                    for (((v, w), &g), &k) in buf.iter_mut().zip(w.iter_mut()).zip(u.grad).zip(gate) {
                        if k == T::zero() {
                            *v = T::zero();
                            continue;
                        }
                        *v = k * (m * *v + g);
                        *w = *w - lr * *v;
                    }
                }
                None => {
                    for ((v, w), &g) in buf.iter_mut().zip(w.iter_mut()).zip(u.grad) {
                        *v = m * *v + g;
                        *w = *w - lr * *v;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales every gradient so that their joint L2 norm is at most `max_norm`
/// and returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: T) -> T {
    let norm = grads.iter().flat_map(|g| g.iter()).fold(T::zero(), |acc, &v| acc + v * v).sqrt();
    if max_norm > T::zero() && norm > max_norm {
        let k = max_norm / norm;
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v = *v * k;
        }
    }
    norm
}

/// Linear warm-up from `base_lr` to `peak_lr`, then cosine decay to zero.
pub fn scheduled_lr(
    epoch: usize,
    base_lr: f64,
    warmup_epochs: usize,
    total_epochs: usize,
    peak_lr: f64,
) -> Result<f64> {
    if warmup_epochs >= total_epochs {
        return Err(Error::Config(format!(
            "warmup_epochs ({warmup_epochs}) must be smaller than total_epochs ({total_epochs})"
        )));
    }
    if epoch >= total_epochs {
        return Err(Error::Config(format!("epoch {epoch} outside schedule of {total_epochs}")));
    }
    if epoch < warmup_epochs {
        let span = (warmup_epochs - 1).max(1) as f64;
        return Ok(base_lr + (peak_lr - base_lr) * epoch as f64 / span);
    }
    let progress = (epoch - warmup_epochs) as f64 / (total_epochs - warmup_epochs) as f64;
    Ok(0.5 * peak_lr * (1.0 + (PI * progress).cos()))
}

/// Step decay: multiply by 0.1 at 60%, 75% and 90% of training.
pub fn step_decay_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    let drops = [0.6, 0.75, 0.9]
        .iter()
        .filter(|&&f| epoch as f64 >= (f * total_epochs as f64).round())
        .count();
    base_lr * 0.1f64.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_param_step(sgd: &mut Sgd<f64>, w: &mut Tensor<f64>, g: f64, lr: f64) {
        let grad = [g];
        sgd.step(&mut [ParamUpdate { name: "w", param: w, grad: &grad, gate: None }], lr).unwrap();
    }

    #[test]
    fn clipping_rescales_joint_norm() {
        let (mut a, mut b) = (vec![3.0f64, 0.0], vec![4.0f64]);
        let n = clip_grad_norm(&mut [&mut a[..], &mut b[..]], 1.0);
        assert_relative_eq!(n, 5.0);
        assert_relative_eq!(a[0], 0.6);
        assert_relative_eq!(b[0], 0.8);
        let mut c = vec![0.3f64];
        clip_grad_norm(&mut [&mut c[..]], 1.0);
        assert_eq!(c, vec![0.3]);
        clip_grad_norm(&mut [&mut c[..]], 0.0);
        assert_eq!(c, vec![0.3]);
    }

    #[test]
    fn plain_step() {
        let mut sgd = Sgd::new(0.0);
        let mut w = Tensor::scalar(1.0);
        one_param_step(&mut sgd, &mut w, 2.0, 0.1);
        assert_relative_eq!(w.item(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn momentum_carry() {
        let mut sgd = Sgd::new(0.9);
        let mut w = Tensor::scalar(0.0);
        // seed v = 1 with a first step of g = 1 at lr = 0
        one_param_step(&mut sgd, &mut w, 1.0, 0.0);
        assert_eq!(sgd.buffer("w").unwrap(), &[1.0]);
        one_param_step(&mut sgd, &mut w, 0.0, 0.1);
        assert_relative_eq!(w.item(), -0.09, epsilon = 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = 1, w1 = -0.1; v2 = 0.9 + 1 = 1.9, w2 = -0.1 - 0.19 = -0.29
        let mut sgd = Sgd::new(0.9);
        let mut w = Tensor::scalar(0.0);
        one_param_step(&mut sgd, &mut w, 1.0, 0.1);
        one_param_step(&mut sgd, &mut w, 1.0, 0.1);
        assert_relative_eq!(w.item(), -0.29, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_whole_step() {
        let mut sgd = Sgd::new(0.9);
        let mut a = Tensor::scalar(1.0f64);
        let mut b = Tensor::scalar(1.0f64);
        let (ga, gb) = ([1.0], [f64::NAN]);
        let err = sgd
            .step(
                &mut [
                    ParamUpdate { name: "a", param: &mut a, grad: &ga, gate: None },
                    ParamUpdate { name: "b", param: &mut b, grad: &gb, gate: None },
                ],
                0.1,
            )
            .unwrap_err();
        assert!(err.to_string().contains("`b`"));
        assert_eq!(a.item(), 1.0);
    }

    #[test]
    fn zero_gate_freezes_weight_and_momentum() {
        let mut sgd = Sgd::new(0.9);
        let mut w = Tensor::vector(vec![0.5f64, 0.5]);
        let gate = [0.0, 1.0];
        for _ in 0..3 {
            let g = [1.0, 1.0];
            sgd.step(&mut [ParamUpdate { name: "w", param: &mut w, grad: &g, gate: Some(&gate) }], 0.1)
                .unwrap();
        }
        assert_eq!(w.data()[0], 0.5);
        assert_eq!(sgd.buffer("w").unwrap()[0], 0.0);
        assert!(w.data()[1] < 0.5);
    }

    #[test]
    fn warmup_then_cosine() {
        assert_relative_eq!(scheduled_lr(0, 0.1, 10, 700, 1.0).unwrap(), 0.1);
        assert_relative_eq!(scheduled_lr(9, 0.1, 10, 700, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(scheduled_lr(5, 0.1, 10, 700, 1.0).unwrap(), 0.6, epsilon = 1e-12);
        assert_relative_eq!(scheduled_lr(10, 0.1, 10, 700, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        // midpoint of the cosine phase
        assert_relative_eq!(scheduled_lr(10 + 345, 0.1, 10, 700, 1.0).unwrap(), 0.5, epsilon = 1e-12);
        assert!(scheduled_lr(0, 0.1, 10, 10, 1.0).is_err());
    }

    #[test]
    fn step_decay_points() {
        assert_relative_eq!(step_decay_lr(59, 100, 0.1), 0.1);
        assert_relative_eq!(step_decay_lr(60, 100, 0.1), 0.01, epsilon = 1e-15);
        assert_relative_eq!(step_decay_lr(75, 100, 0.1), 0.001, epsilon = 1e-15);
        assert_relative_eq!(step_decay_lr(99, 100, 0.1), 0.0001, epsilon = 1e-15);
    }
}
