//! Stochastic gradient descent with decoupled-by-name velocity buffers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamWalk;
use crate::tensor::Scalar;

/// Optimizer hyperparameters and per-parameter velocity state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    #[serde(skip)]
    velocity: HashMap<String, Vec<f64>>,
}

impl Default for OptimState {
    fn default() -> Self {
        OptimState {
            lr: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.0,
            velocity: HashMap::new(),
        }
    }
}

impl OptimState {
    pub fn new(lr: f64, weight_decay: f64, momentum: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::config("optim.lr", "must be > 0"));
        }
        if weight_decay < 0.0 {
            return Err(Error::config("optim.weight_decay", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("optim.momentum", "must be in [0, 1)"));
        }
        Ok(OptimState {
            lr,
            weight_decay,
            momentum,
            velocity: HashMap::new(),
        })
    }

    /// One SGD step over every learnable parameter with a populated
    /// gradient: g' = g + wd * w, v = m * v + g', w -= lr * v. Batchnorm
    /// scale/shift (no_decay) skip the weight-decay term. Gradients are
    /// left in place; call [`crate::layers::zero_grads`] afterwards.
    pub fn step<T: Scalar>(&mut self, params: &mut impl ParamWalk<T>) {
        let lr = self.lr;
        let wd = self.weight_decay;
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        params.for_each_mut("", &mut |name, meta, t| {
            if !meta.learnable {
                return;
            }
            let Some(grad) = t.grad.as_ref() else { return };
            let decay = if meta.no_decay { 0.0 } else { wd };
            if momentum > 0.0 {
                let v = velocity
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; t.data.len()]);
                for ((w, &g), vel) in t.data.iter_mut().zip(grad).zip(v.iter_mut()) {
                    let adjusted = g.to_f64() + decay * w.to_f64();
                    *vel = momentum * *vel + adjusted;
                    *w = T::from_f64(w.to_f64() - lr * *vel);
                }
            } else {
                for (w, &g) in t.data.iter_mut().zip(grad) {
                    let adjusted = g.to_f64() + decay * w.to_f64();
                    *w = T::from_f64(w.to_f64() - lr * adjusted);
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ParamMeta, ParamWalk};
    use crate::tensor::Tensor;

    struct OneParam {
        w: Tensor<f64>,
        meta: ParamMeta,
    }

    impl ParamWalk<f64> for OneParam {
        fn for_each(&self, _p: &str, f: &mut dyn FnMut(&str, ParamMeta, &Tensor<f64>)) {
            f("w", self.meta, &self.w);
        }
        fn for_each_mut(&mut self, _p: &str, f: &mut dyn FnMut(&str, ParamMeta, &mut Tensor<f64>)) {
            f("w", self.meta, &mut self.w);
        }
    }

    fn param(w: f64, g: Option<f64>, meta: ParamMeta) -> OneParam {
        let mut t = Tensor::from_vec(vec![1], vec![w]).unwrap().with_grad();
        t.grad = g.map(|v| vec![v]);
        OneParam { w: t, meta }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = param(1.5, Some(0.0), ParamMeta::WEIGHT);
        let mut opt = OptimState::new(1e-3, 0.0, 0.0).unwrap();
        opt.step(&mut p);
        assert_eq!(p.w.data[0], 1.5);
    }

    #[test]
    fn single_step_arithmetic() {
        // w = 1, g = 1, lr = 1e-3, wd = 5e-4: w' = 1 - 1e-3 * 1.0005.
        let mut p = param(1.0, Some(1.0), ParamMeta::WEIGHT);
        let mut opt = OptimState::new(1e-3, 5e-4, 0.0).unwrap();
        opt.step(&mut p);
        assert!((p.w.data[0] - 0.9989995).abs() < 1e-15);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        let (lr, wd, m) = (0.1, 0.01, 0.9);
        let g = [0.5, -0.3];
        let mut w = 2.0;
        let mut v = 0.0;
        for gi in g {
            let adjusted = gi + wd * w;
            v = m * v + adjusted;
            w -= lr * v;
        }

        let mut p = param(2.0, Some(g[0]), ParamMeta::WEIGHT);
        let mut opt = OptimState::new(lr, wd, m).unwrap();
        opt.step(&mut p);
        p.w.grad = Some(vec![g[1]]);
        opt.step(&mut p);
        assert!((p.w.data[0] - w).abs() < 1e-15, "{} vs {w}", p.w.data[0]);
    }

    #[test]
    fn no_decay_params_skip_weight_decay() {
        let mut p = param(1.0, Some(0.0), ParamMeta::NORM);
        let mut opt = OptimState::new(1e-3, 5e-4, 0.0).unwrap();
        opt.step(&mut p);
        assert_eq!(p.w.data[0], 1.0);
    }

    #[test]
    fn state_params_are_never_stepped() {
        let mut p = param(1.0, Some(1.0), ParamMeta::STATE);
        let mut opt = OptimState::new(1e-3, 0.0, 0.0).unwrap();
        opt.step(&mut p);
        assert_eq!(p.w.data[0], 1.0);
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(OptimState::new(0.0, 0.0, 0.0).is_err());
        assert!(OptimState::new(1e-3, -0.1, 0.0).is_err());
        assert!(OptimState::new(1e-3, 0.0, 1.0).is_err());
    }
}
