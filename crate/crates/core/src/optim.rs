//! Adam over a fixed list of flat parameter blocks.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// L2 penalty folded into the gradient (coupled, as in classic Adam).
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, block_sizes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            first: block_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: block_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of every block; `blocks[i]` pairs parameters with their gradient.
    pub fn step(&mut self, blocks: &mut [(&mut [T], &[T])]) {
        assert_eq!(
            blocks.len(),
            self.first.len(),
            "block count changed between steps"
        );
        self.step += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let lr = T::lit(self.cfg.learning_rate);
        let eps = T::lit(self.cfg.epsilon);
        let wd = T::lit(self.cfg.weight_decay);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        for (b, (params, grads)) in blocks.iter_mut().enumerate() {
            let m = &mut self.first[b];
            let v = &mut self.second[b];
            assert_eq!(params.len(), m.len());
            assert_eq!(grads.len(), m.len());
            for i in 0..m.len() {
                let g = grads[i] + wd * params[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new(AdamConfig::with_learning_rate(0.1), &[2]);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut [(&mut p, &[3.0, -0.5])]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::<f64>::new(AdamConfig::with_learning_rate(0.05), &[1]);
        let mut x = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 2.0)];
            adam.step(&mut [(&mut x, &g)]);
        }
        assert!((x[0] - 2.0).abs() < 1e-3);
    }
}
