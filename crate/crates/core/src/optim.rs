//! First-order optimizers over the flat parameter vector, plus the
//! linear-warmup / cosine-decay learning-rate schedule shared by both stages.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub trait Optimizer {
    /// Applies one update with learning rate `lr`.
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64);
}

/// AdamW with decoupled weight decay scaled by the learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self { beta1: betas.0, beta2: betas.1, eps, weight_decay, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if lr == 0.0 {
                continue;
            }
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * self.weight_decay * params[i];
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// RMSprop with smoothing constant `alpha` and L2 weight decay folded into
/// the gradient.
#[derive(Debug, Clone)]
pub struct RmsProp {
    alpha: f64,
    eps: f64,
    weight_decay: f64,
    sq: Vec<f64>,
}

impl RmsProp {
    pub fn new(n: usize, alpha: f64, eps: f64, weight_decay: f64) -> Self {
        Self { alpha, eps, weight_decay, sq: vec![0.0; n] }
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.sq[i] = self.alpha * self.sq[i] + (1.0 - self.alpha) * g * g;
            if lr != 0.0 {
                params[i] -= lr * g / (self.sq[i].sqrt() + self.eps);
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then half-cosine decay to 0
/// at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl WarmupCosine {
    pub fn lr_at(&self, step: usize) -> f64 {
        let (w, s) = (self.warmup, self.total);
        if step >= s {
            return 0.0;
        }
        if step <= w {
            return self.peak * step as f64 / w as f64;
        }
        let progress = (step - w) as f64 / (s - w) as f64;
        self.peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_zero_lr_is_a_no_op() {
        let mut p = vec![0.5, -1.25, 3.0];
        let before = p.clone();
        let mut opt = AdamW::new(3, (0.9, 0.95), 1e-8, 0.01);
        opt.step(&mut p, &[0.1, -0.2, 0.3], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first update is lr·sign(g) (up to eps).
        let mut p = vec![1.0, 1.0];
        let mut opt = AdamW::new(2, (0.9, 0.95), 1e-12, 0.0);
        opt.step(&mut p, &[2.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-9 && (p[1] - 1.1).abs() < 1e-9);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut p = vec![2.0];
        let mut opt = AdamW::new(1, (0.9, 0.95), 1e-8, 0.5);
        opt.step(&mut p, &[0.0], 0.1);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_first_step() {
        // sq = (1 - 0.99)·g², update = lr·g/sqrt(sq) = lr·10·sign(g)
        let mut p = vec![0.0];
        let mut opt = RmsProp::new(1, 0.99, 0.0, 0.0);
        opt.step(&mut p, &[4.0], 0.01);
        assert!((p[0] + 0.1).abs() < 1e-12);
        let mut q = vec![0.7];
        RmsProp::new(1, 0.99, 1e-8, 0.0).step(&mut q, &[4.0], 0.0);
        assert_eq!(q, vec![0.7]);
    }

    #[test]
    fn schedule_shape() {
        let s = WarmupCosine { peak: 1.0, warmup: 10, total: 110 };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(5), 0.5);
        assert_eq!(s.lr_at(10), 1.0);
        assert!((s.lr_at(60) - 0.5).abs() < 1e-15);
        assert_eq!(s.lr_at(110), 0.0);
        assert!((1..=10).all(|i| s.lr_at(i) >= s.lr_at(i - 1)));
        assert!((11..=110).all(|i| s.lr_at(i) <= s.lr_at(i - 1)));
    }
}
