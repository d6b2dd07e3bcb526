use serde::{Deserialize, Serialize};

use crate::param::Param;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Stochastic gradient descent with classical momentum.
    Momentum,
    /// Adaptive moment estimation.
    AdaptiveMoments,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Momentum coefficient, or the first-moment decay for adaptive moments.
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter optimizer state. Parameters must be passed to [`Optimizer::step`]
/// in the same order every time.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: Vec<&mut Param<T>>) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            if self.config.kind == OptimizerKind::AdaptiveMoments {
                self.second = self.first.clone();
            }
        }
        assert_eq!(self.first.len(), params.len(), "parameter list changed between steps");
        self.steps += 1;
        let lr = self.config.learning_rate;
        let b1 = T::from_f64_lossy(self.config.beta1);
        match self.config.kind {
            OptimizerKind::Momentum => {
                let lr = T::from_f64_lossy(lr);
                for (p, v) in params.into_iter().zip(&mut self.first) {
                    for ((w, g), m) in p.value.iter_mut().zip(&mut p.grad).zip(v.iter_mut()) {
                        *m = b1 * *m + *g;
                        *w -= lr * *m;
                        *g = T::zero();
                    }
                }
            }
            OptimizerKind::AdaptiveMoments => {
                let b2 = T::from_f64_lossy(self.config.beta2);
                let t = self.steps as i32;
                let c1 = 1.0 - self.config.beta1.powi(t);
                let c2 = 1.0 - self.config.beta2.powi(t);
                let step_size = T::from_f64_lossy(lr * c2.sqrt() / c1);
                let eps = T::from_f64_lossy(self.config.epsilon * c2.sqrt());
                let one = T::one();
                for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
                    for (((w, g), m), v) in p
                        .value
                        .iter_mut()
                        .zip(&mut p.grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = b1 * *m + (one - b1) * *g;
                        *v = b2 * *v + (one - b2) * *g * *g;
                        *w -= step_size * *m / (v.sqrt() + eps);
                        *g = T::zero();
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_descent(kind: OptimizerKind, lr: f64) -> f64 {
        // minimise (w - 3)^2
        let mut p = Param::<f64>::filled("w", vec![1], 0.0);
        let mut opt = Optimizer::new(OptimizerConfig {
            kind,
            learning_rate: lr,
            ..OptimizerConfig::default()
        });
        for _ in 0..2000 {
            p.grad[0] = 2.0 * (p.value[0] - 3.0);
            opt.step(vec![&mut p]);
        }
        p.value[0]
    }

    #[test]
    fn both_optimizers_converge_on_a_quadratic() {
        assert!((quadratic_descent(OptimizerKind::Momentum, 0.05) - 3.0).abs() < 1e-6);
        assert!((quadratic_descent(OptimizerKind::AdaptiveMoments, 0.05) - 3.0).abs() < 1e-3);
    }

    #[test]
    fn momentum_first_step_is_plain_sgd_and_clears_grads() {
        let mut p = Param::<f64>::filled("w", vec![2], 1.0);
        p.grad = vec![0.5, -1.0];
        let mut opt = Optimizer::new(OptimizerConfig {
            learning_rate: 0.1,
            ..OptimizerConfig::default()
        });
        opt.step(vec![&mut p]);
        assert_eq!(p.value, vec![0.95, 1.1]);
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }
}
