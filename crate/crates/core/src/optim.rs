//! SGD with momentum and Adam, following the usual framework update rules
//! (L2 weight decay folded into the gradient).

use std::collections::HashMap;

use crate::param::{ParamKey, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Optimizer<S: Scalar> {
    /// Applies one update from the gradients currently held in `store`.
    fn step(&mut self, store: &mut ParamStore<S>);
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct Sgd<S> {
    cfg: SgdConfig,
    velocity: HashMap<ParamKey, Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: HashMap::new(),
        }
    }
}

impl<S: Scalar> Optimizer<S> for Sgd<S> {
    fn step(&mut self, store: &mut ParamStore<S>) {
        let lr = S::of(self.cfg.lr);
        let mu = S::of(self.cfg.momentum);
        let wd = S::of(self.cfg.weight_decay);
        for p in store.iter_mut() {
            let mut g = p.grad.clone();
            if self.cfg.weight_decay != 0.0 {
                for (gi, &wi) in g.data_mut().iter_mut().zip(p.value.data()) {
                    *gi += wd * wi;
                }
            }
            let update = if self.cfg.momentum != 0.0 {
                match self.velocity.get_mut(&p.key()) {
                    Some(v) => {
                        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                            *vi = mu * *vi + gi;
                        }
                        v.clone()
                    }
                    None => {
                        self.velocity.insert(p.key(), g.clone());
                        g
                    }
                }
            } else {
                g
            };
            for (wi, &ui) in p.value.data_mut().iter_mut().zip(update.data()) {
                *wi -= lr * ui;
            }
        }
    }

    fn lr(&self) -> f64 {
        self.cfg.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    /// `lr = 0.01`, `eps = 1e-4`, betas `(0.9, 0.999)`.
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-4,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<S> {
    step: i32,
    m: Tensor<S>,
    v: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Adam<S> {
    cfg: AdamConfig,
    state: HashMap<ParamKey, Moments<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            state: HashMap::new(),
        }
    }
}

impl<S: Scalar> Optimizer<S> for Adam<S> {
    fn step(&mut self, store: &mut ParamStore<S>) {
        let c = self.cfg;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (lr, eps, wd) = (S::of(c.lr), S::of(c.eps), S::of(c.weight_decay));
        for p in store.iter_mut() {
            let st = self.state.entry(p.key()).or_insert_with(|| Moments {
                step: 0,
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            st.step += 1;
            let bc1 = S::one() - b1.powi(st.step);
            let bc2 = S::one() - b2.powi(st.step);
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for i in 0..values.len() {
                let g = grads[i] + wd * values[i];
                let m = &mut st.m.data_mut()[i];
                *m = b1 * *m + (S::one() - b1) * g;
                let mhat = *m / bc1;
                let v = &mut st.v.data_mut()[i];
                *v = b2 * *v + (S::one() - b2) * g * g;
                let vhat = *v / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    fn lr(&self) -> f64 {
        self.cfg.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

/// Cosine annealing from `base` to `min` over `total` epochs.
pub fn cosine_lr(base: f64, min: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(&[w]));
        s.get_mut(id).grad = Tensor::vector(&[g]);
        s
    }

    #[test]
    fn sgd_single_step() {
        let mut s = store_with(1.0, 2.0);
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        opt.step(&mut s);
        assert!((s.iter().next().unwrap().value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let mut s = store_with(1.5, 0.0);
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        for _ in 0..5 {
            opt.step(&mut s);
        }
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.5);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = store_with(0.0, 1.0);
        let mut opt = Sgd::new(SgdConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        opt.step(&mut s);
        opt.step(&mut s);
        // -1 then -(0.9 + 1)
        assert!((s.iter().next().unwrap().value.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_normalized_gradient() {
        for g in [3.0, -0.5, 1e-3] {
            let mut s = store_with(0.0, g);
            let mut opt = Adam::new(AdamConfig::default());
            opt.step(&mut s);
            let expected = -0.01 * g / (g.abs() + 1e-4);
            let got = s.iter().next().unwrap().value.data()[0];
            assert!((got - expected).abs() < 1e-12, "g={g}: {got} vs {expected}");
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.025, 0.001, 0, 50), 0.025);
        assert!((cosine_lr(0.025, 0.001, 50, 50) - 0.001).abs() < 1e-15);
    }
}
