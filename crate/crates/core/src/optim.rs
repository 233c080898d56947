//! SGD with momentum and weight decay, and the warmup + cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::autodiff::ParamStore;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr_max: 1e-2,
            lr_min: 1e-5,
            warmup_fraction: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(invalid("need 0 < lr_min <= lr_max"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup fraction must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_fraction * total_steps as f64).round() as usize
    }
}

/// Learning rate at `step` of `0..=total_steps`: linear from 0 to `lr_max`
/// over the warmup steps, then cosine down to `lr_min` at `total_steps`.
pub fn lr_at(s: &LrSchedule, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return s.lr_max;
    }
    let step = step.min(total_steps);
    let warm = s.warmup_steps(total_steps).min(total_steps);
    if step < warm {
        return s.lr_max * step as f64 / warm as f64;
    }
    let span = total_steps - warm;
    if span == 0 {
        return s.lr_max;
    }
    let t = (step - warm) as f64 / span as f64;
    s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + (PI * t).cos())
}

/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        for (name, p) in params.iter_mut() {
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            let grad = p.grad.data();
            for ((w, g), vel) in p.value.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *vel = self.momentum * *vel + d;
                *w -= lr * *vel;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn schedule_landmarks() {
        let s = LrSchedule::default();
        let total = 100;
        assert_eq!(lr_at(&s, 0, total), 0.0);
        assert_eq!(lr_at(&s, s.warmup_steps(total), total), 1e-2);
        assert!((lr_at(&s, total, total) - 1e-5).abs() < 1e-18);
        assert!((lr_at(&s, 5, total) - 5e-3).abs() < 1e-15);
        let mid = lr_at(&s, 55, total);
        assert!((mid - (1e-5 + 0.5 * (1e-2 - 1e-5))).abs() < 1e-12);
        let seq: Vec<f64> = (10..=100).map(|k| lr_at(&s, k, total)).collect();
        assert!(seq.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sgd_matches_hand_rolled_momentum() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::row(vec![1.0, -2.0]));
        let mut opt = Sgd::new(0.9, 0.1);
        let (mut w, mut v) = ([1.0f64, -2.0], [0.0f64; 2]);
        for step in 0..3 {
            params.zero_grad();
            let g = [0.5 * (step + 1) as f64, -1.0];
            params
                .iter_mut()
                .for_each(|(_, p)| p.grad.data_mut().copy_from_slice(&g));
            opt.step(&mut params, 0.01);
            for k in 0..2 {
                v[k] = 0.9 * v[k] + g[k] + 0.1 * w[k];
                w[k] -= 0.01 * v[k];
            }
        }
        assert_eq!(params.value("w").unwrap().data(), &w);
    }
}
