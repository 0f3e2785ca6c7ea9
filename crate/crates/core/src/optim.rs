//! Adaptive-moment optimizer shared by toy-model training and segment
//! learning.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    hp: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, hp: AdamParams) -> Self {
        Self {
            hp,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Bias-corrected update direction for `grads`; the caller applies
    /// `param -= lr * delta`.
    pub fn direction(&mut self, grads: &[f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.hp;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grads)
            .map(|((m, v), &g)| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                (*m / bc1) / ((*v / bc2).sqrt() + eps)
            })
            .collect()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        let d = self.direction(grads);
        for (p, d) in params.iter_mut().zip(d) {
            *p -= lr * d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, AdamParams::default());
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g, 0.05);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn first_step_has_unit_magnitude() {
        let mut opt = Adam::new(3, AdamParams::default());
        let d = opt.direction(&[0.5, -2.0, 1e-3]);
        for (v, s) in d.iter().zip([1.0, -1.0, 1.0]) {
            assert!((v - s).abs() < 1e-4);
        }
    }
}
