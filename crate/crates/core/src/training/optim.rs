//! Learning-rate schedule and SGD with momentum.

use std::f64::consts::PI;

use crate::error::{config_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn new(warmup_steps: usize, total_steps: usize) -> Self {
        ScheduleConfig { lr_max: 0.1, lr_min: 1e-4, warmup_steps, total_steps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lr_min && self.lr_min < self.lr_max) {
            return Err(config_err!("need 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(config_err!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps,
                self.total_steps
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine annealing down to `lr_min`
/// at `total_steps`. Steps past the end stay at `lr_min`.
pub fn lr_schedule(step: usize, cfg: &ScheduleConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.lr_max * step as f64 / cfg.warmup_steps as f64;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * progress).cos())
}

/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`, then gradients are zeroed.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        if self.velocity.len() != store.params().len() {
            self.velocity = store.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        }
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            let w = p.value.data_mut();
            let g = p.gradient.data_mut();
            for ((wi, gi), vi) in w.iter_mut().zip(g.iter_mut()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + (*gi + self.weight_decay * *wi);
                *wi -= lr * *vi;
                *gi = 0.0;
            }
        }
    }
}

/// Rescales the gradients of all `stores` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(stores: &mut [&mut ParamStore], max_norm: f32) -> f32 {
    let sq: f64 = stores
        .iter()
        .flat_map(|s| s.params())
        .flat_map(|p| p.gradient.data())
        .map(|&g| g as f64 * g as f64)
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let k = max_norm / norm;
        for s in stores.iter_mut() {
            for p in s.params_mut() {
                p.gradient.data_mut().iter_mut().for_each(|g| *g *= k);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f32, g: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add_param("w", Tensor::scalar(w)).unwrap();
        s.param_mut(id).gradient = Tensor::scalar(g);
        s
    }

    #[test]
    fn schedule_landmarks() {
        let cfg = ScheduleConfig::new(10, 110);
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert!((lr_schedule(5, &cfg) - 0.05).abs() < 1e-12);
        assert!((lr_schedule(10, &cfg) - 0.1).abs() < 1e-12);
        assert!((lr_schedule(60, &cfg) - 0.05005).abs() < 1e-12);
        assert!((lr_schedule(110, &cfg) - 1e-4).abs() < 1e-12);
        assert!((lr_schedule(500, &cfg) - 1e-4).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 10..=110 {
            let lr = lr_schedule(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(ScheduleConfig::new(10, 10).validate().is_err());
        assert!(ScheduleConfig { lr_min: 0.2, ..cfg }.validate().is_err());
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(1.5, 0.0);
        Sgd::new(0.9, 0.0).step(&mut s, 0.1);
        assert_eq!(s.params()[0].value.item().unwrap(), 1.5);
    }

    #[test]
    fn pure_weight_decay_shrinks() {
        let mut s = store(2.0, 0.0);
        Sgd::new(0.9, 1e-4).step(&mut s, 0.1);
        let expected = 2.0 * (1.0 - 0.1 * 1e-4);
        assert!((s.params()[0].value.item().unwrap() - expected).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_steps() {
        let (lr, g) = (0.1f32, 0.5f32);
        let mut s = store(0.0, g);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, lr);
        assert_eq!(s.params()[0].gradient.item().unwrap(), 0.0);
        s.params_mut()[0].gradient = Tensor::scalar(g);
        opt.step(&mut s, lr);
        let expected = -lr * (g + 1.9 * g);
        assert!((s.params()[0].value.item().unwrap() - expected).abs() < 1e-7);
    }

    #[test]
    fn clipping_rescales_jointly() {
        let (mut a, mut b) = (store(0.0, 3.0), store(0.0, 4.0));
        assert_eq!(clip_grad_norm(&mut [&mut a, &mut b], 1.0), 5.0);
        assert!((a.params()[0].gradient.item().unwrap() - 0.6).abs() < 1e-7);
        assert!((b.params()[0].gradient.item().unwrap() - 0.8).abs() < 1e-7);
        assert_eq!(clip_grad_norm(&mut [&mut a, &mut b], 10.0), 1.0);
        assert!((a.params()[0].gradient.item().unwrap() - 0.6).abs() < 1e-7);
    }
}
