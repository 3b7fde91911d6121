//! Parameter update rules.

use alloc::vec;
use alloc::vec::Vec;

use crate::config::{OptimizerKind, TrainableScope};
use crate::model::CsiModel;
use crate::real::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment (bias-corrected, no weight decay) or plain SGD.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    scope: TrainableScope,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, scope: TrainableScope) -> Self {
        Self {
            kind,
            lr,
            scope,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, model: &mut CsiModel<T>) {
        self.step += 1;
        let mut params = model.named_params_mut();
        if self.m.is_empty() && self.kind == OptimizerKind::AdaptiveMoment {
            self.m = params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.len()])
                .collect();
            self.v = self.m.clone();
        }
        let lr = T::lit(self.lr);
        match self.kind {
            OptimizerKind::PlainSgd => {
                for (name, p) in params.iter_mut() {
                    if !CsiModel::<T>::is_trainable(name, self.scope) {
                        continue;
                    }
                    for (w, &g) in p.value.iter_mut().zip(&p.grad) {
                        *w -= lr * g;
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
                let bc1 = T::one() - T::lit(libm::pow(ADAM_BETA1, self.step as f64));
                let bc2 = T::one() - T::lit(libm::pow(ADAM_BETA2, self.step as f64));
                let eps = T::lit(ADAM_EPS);
                for (i, (name, p)) in params.iter_mut().enumerate() {
                    if !CsiModel::<T>::is_trainable(name, self.scope) {
                        continue;
                    }
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.value.len() {
                        let g = p.grad[j];
                        m[j] = b1 * m[j] + (T::one() - b1) * g;
                        v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p.value[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneConfig, ModelVariant, StepShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> CsiModel<f64> {
        let cfg = BackboneConfig {
            n_layers: 1,
            model_dim: 8,
            n_heads: 2,
            ff_dim: 16,
            max_positions: 4,
            proj_hidden: 8,
            ..BackboneConfig::ci()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        CsiModel::new(
            ModelVariant::CsiLlm,
            StepShape {
                n_tx: 1,
                n_rx: 1,
                n_prb: 1,
            },
            &cfg,
            &mut rng,
        )
        .unwrap()
    }

    fn fill_grads(m: &mut CsiModel<f64>, g: f64) {
        for (_, p) in m.named_params_mut() {
            p.grad.iter_mut().for_each(|x| *x = g);
        }
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut m = model();
        let before = m.clone();
        fill_grads(&mut m, -0.3);
        let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, 0.01, TrainableScope::Full);
        opt.step(&mut m);
        for ((_, a), (_, b)) in m.named_params().iter().zip(before.named_params()) {
            for (x, y) in a.value.iter().zip(&b.value) {
                assert!((x - y - 0.01).abs() < 1e-9);
            }
        }
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn sgd_and_scope() {
        let mut m = model();
        let before = m.clone();
        fill_grads(&mut m, 2.0);
        let mut opt = Optimizer::new(OptimizerKind::PlainSgd, 0.5, TrainableScope::HeadsOnly);
        opt.step(&mut m);
        for ((name, a), (_, b)) in m.named_params().iter().zip(before.named_params()) {
            let moved = CsiModel::<f64>::is_trainable(name, TrainableScope::HeadsOnly);
            for (x, y) in a.value.iter().zip(&b.value) {
                let expected = if moved { y - 1.0 } else { *y };
                assert_eq!(*x, expected, "{name}");
            }
        }
    }
}
