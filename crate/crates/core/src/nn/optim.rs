use serde::{Deserialize, Serialize};

use super::param::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment gradient descent over a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: Vec<&mut Param>) {
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let step_size = (learning_rate as f64 * bc2.sqrt() / bc1) as f32;
        for (p, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new("x", vec![2], vec![3.0, -2.0]);
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.05,
            beta1: 0.9,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            p.grad = p.value.iter().map(|v| 2.0 * v).collect();
            opt.step(vec![&mut p]);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2), "{:?}", p.value);
        assert!(p.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new("x", vec![1], vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        p.grad[0] = 123.0;
        opt.step(vec![&mut p]);
        assert!((p.value[0] - (1.0 - 2e-4)).abs() < 1e-6);
    }
}
