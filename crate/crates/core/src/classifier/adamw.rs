//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(num_params: usize, learning_rate: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: betas.0,
            beta2: betas.1,
            epsilon: 1e-8,
            weight_decay,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::structural(format!(
                "optimizer holds {} moments, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        let decay = lr * self.weight_decay;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= decay * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_applies_only_weight_decay() {
        let mut opt = AdamW::new(3, 1e-4, (0.9, 0.95), 0.01);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            let before = p.clone();
            opt.step(&mut p, &[0.0; 3]).unwrap();
            for (a, b) in before.iter().zip(&p) {
                assert_eq!(*b, a - 1e-4 * 0.01 * a);
            }
        }
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, the first Adam step has magnitude lr for any non-zero gradient.
        let mut opt = AdamW::new(2, 1e-3, (0.9, 0.95), 0.0);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.01]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = AdamW::new(2, 1e-3, (0.9, 0.95), 0.0);
        assert!(opt.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
