//! Adam with per-parameter learning rates.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// Forget the moment estimates and the bias-correction clock.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|m| *m = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
        self.t = 0;
    }

    /// One descent step on `params`. Entries with `frozen[k]` keep their value
    /// and moments.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64], frozen: &[bool]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            if frozen[k] {
                continue;
            }
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= lrs[k] * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -3.0];
        adam.step(&mut p, &[4.0, -0.001], &[0.1, 0.5], &[false, false]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - (-2.5)).abs() < 1e-4);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::new(3, 0.9, 0.999, 1e-8);
        let target = [1.5, -2.0, 0.25];
        let mut p = vec![0.0; 3];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            adam.step(&mut p, &g, &[0.05; 3], &[false; 3]);
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-3);
        }
    }

    #[test]
    fn frozen_entries_untouched_and_reset_clears_state() {
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, 1.0];
        adam.step(&mut p, &[1.0, 1.0], &[0.1, 0.1], &[false, true]);
        assert_eq!(p[1], 1.0);
        assert_eq!(adam.steps_taken(), 1);
        adam.reset();
        assert_eq!(adam, Adam::new(2, 0.9, 0.999, 1e-8));
    }
}
