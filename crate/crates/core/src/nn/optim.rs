use std::collections::BTreeMap;

use super::tensor::{Param, Scalar, Tensor};
use super::NnError;

/// Polynomial learning-rate decay: `base_lr * (1 - min(step, total) / total)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self {
            base_lr,
            total_steps,
            power: 2.0,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * (1.0 - frac).powf(self.power)
    }
}

/// Adam with bias correction. Moments are keyed by parameter name and created on first use.
///
/// A parameter whose gradient is exactly zero everywhere is skipped for that step: neither its
/// value nor its moments change. A branch that received no loss signal therefore stays put
/// instead of coasting on momentum from earlier steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every parameter. Nothing is modified if any gradient is non-finite
    /// or any stored moment has the wrong shape.
    pub fn step(&mut self, params: Vec<(String, &mut Param<T>)>, lr: f64) -> Result<(), NnError> {
        for (name, p) in &params {
            if p.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFinite("adam gradient"));
            }
            if let Some((m, _)) = self.moments.get(name) {
                if m.shape() != p.value.shape() {
                    return Err(NnError::Shape(format!(
                        "adam moment for {name} has shape {:?}, parameter {:?}",
                        m.shape(),
                        p.value.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = T::of(lr * bc2.sqrt() / bc1);
        let eps_hat = T::of(self.eps * bc2.sqrt());
        for (name, p) in params {
            if p.grad.data().iter().all(|&g| g == T::zero()) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let grads = p.grad.data();
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + c1 * g;
                *vi = b2 * *vi + c2 * g * g;
                *w -= step_size * *mi / (vi.sqrt() + eps_hat);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn param(values: &[f32], grads: &[f32]) -> Param<f32> {
        let mut p = Param::new(Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
        p.grad.data_mut().copy_from_slice(grads);
        p
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut adam = Adam::new();
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        for _ in 0..5 {
            adam.step(vec![("w".into(), &mut p)], 1e-3).unwrap();
        }
        assert_eq!(p.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn all_zero_gradient_freezes_parameter_and_moments() {
        let mut adam = Adam::new();
        let mut p = param(&[1.0, -2.0], &[0.5, -0.5]);
        adam.step(vec![("w".into(), &mut p)], 1e-2).unwrap();
        let (value, moments) = (p.value.clone(), adam.moments.clone());
        p.zero_grad();
        adam.step(vec![("w".into(), &mut p)], 1e-2).unwrap();
        assert_eq!(p.value, value);
        assert_eq!(adam.moments, moments);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new();
        let mut p = Param::new(Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap());
        p.grad.data_mut().copy_from_slice(&[0.3, -7.0, 1e3]);
        adam.step(vec![("w".into(), &mut p)], 1e-3).unwrap();
        // m_hat / sqrt(v_hat) = sign(g) on the first step
        for (&w, s) in p.value.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - s * 1e-3).abs() < 1e-9, "{w}");
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut adam = Adam::new();
        let mut a = param(&[1.0], &[0.5]);
        let mut b = param(&[2.0], &[f32::INFINITY]);
        let err = adam.step(vec![("a".into(), &mut a), ("b".into(), &mut b)], 1e-3);
        assert_eq!(err, Err(NnError::NonFinite("adam gradient")));
        assert_eq!(a.value.data(), &[1.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut adam = Adam::new();
            let mut p = param(&[0.1, 0.2, 0.3], &[0.0; 3]);
            for s in 0..20u64 {
                let g: Vec<f32> = (0..3).map(|i| ((s * 3 + i) as f32 * 0.77).sin()).collect();
                p.grad.data_mut().copy_from_slice(&g);
                adam.step(vec![("p".into(), &mut p)], 1e-2).unwrap();
            }
            p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::new(1e-3, 100);
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(50) - 2.5e-4).abs() < 1e-15);
        assert_eq!(s.lr(100), 0.0);
        assert_eq!(s.lr(1000), 0.0);
    }

    proptest! {
        #[test]
        fn schedule_is_non_increasing(base in 1e-6f64..1.0, total in 1u64..10_000, a in 0u64..20_000, b in 0u64..20_000) {
            let s = LrSchedule::new(base, total);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.lr(hi) <= s.lr(lo));
            prop_assert_eq!(s.lr(total), 0.0);
        }
    }
}
