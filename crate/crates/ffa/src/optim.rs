//! Adam with the default moment coefficients and bias correction.

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
}

/// Standard Adam state: first/second moments per parameter plus the shared
/// step count. β1 = 0.9, β2 = 0.999, ε = 1e-8.
pub struct Adam<T: Scalar> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps taken so far.
    pub t: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Adam<T> {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// One bias-corrected update over every parameter; gradients are cleared
    /// afterwards. A parameter without a gradient is an error.
    pub fn step(&mut self, params: &[(String, Tensor<T>)]) -> Result<(), OptimError> {
        for (name, p) in params {
            if p.grad().is_none() {
                return Err(OptimError::MissingGradient(name.clone()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let lr = T::from_f64(self.learning_rate);
        let eps = T::from_f64(self.epsilon);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        for (name, p) in params {
            let grad = p.grad().expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            let mut data = p.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            drop(data);
            p.zero_grad();
        }
        Ok(())
    }
}
