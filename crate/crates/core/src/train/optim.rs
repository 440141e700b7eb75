//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub total: usize,
    pub warmup: usize,
    /// `rate(0) = peak * warmup_start` when `warmup > 0`.
    pub warmup_start: f64,
}

impl Schedule {
    pub fn new(peak: f64, total: usize, warmup_frac: f64, warmup_start: f64) -> Self {
        let warmup = ((total as f64) * warmup_frac).ceil() as usize;
        Schedule {
            peak,
            total,
            warmup: warmup.min(total),
            warmup_start,
        }
    }

    /// Linear ramp from `peak * warmup_start` over `warmup` steps, then a
    /// cosine decay reaching exactly 0 at `total`.
    pub fn rate(&self, step: usize) -> f64 {
        if step < self.warmup {
            let f = step as f64 / self.warmup as f64;
            return self.peak * (self.warmup_start + (1.0 - self.warmup_start) * f);
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 || step >= self.total {
            return if step >= self.total { 0.0 } else { self.peak };
        }
        let progress = (step - self.warmup) as f64 / span as f64;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment estimates for a fixed list of parameters. Each parameter has its
/// own rate multiplier relative to the schedule.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
    scales: Vec<f64>,
    last_rates: Vec<f64>,
    steps: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sizes: &[usize], scales: Vec<f64>) -> Self {
        assert_eq!(sizes.len(), scales.len());
        AdamW {
            cfg,
            slots: sizes
                .iter()
                .map(|&n| Slot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
            last_rates: vec![0.0; scales.len()],
            scales,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Rate applied to parameter `i` on the most recent step.
    pub fn last_rate(&self, i: usize) -> f64 {
        self.last_rates[i]
    }

    /// One update at base rate `rate`. `params[i]` pairs with `grads[i]`;
    /// decay applies to matrices only.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], rate: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = rate * self.scales[i];
            self.last_rates[i] = lr;
            let decay = if p.rank() >= 2 { weight_decay } else { 0.0 };
            let slot = &mut self.slots[i];
            for (((w, &gi), m), v) in p.values_mut().iter_mut().zip(g.values()).zip(&mut slot.m).zip(&mut slot.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(1e-3, 100, 0.1, 0.1);
        assert_eq!(s.rate(0), 1e-4);
        assert!((s.rate(10) - 1e-3).abs() < 1e-18);
        assert!(s.rate(100) <= 1e-3 * 1e-3);
        assert!(s.rate(99) < s.rate(50));
        let flat = Schedule::new(2.0, 10, 0.0, 0.1);
        assert_eq!(flat.rate(0), 2.0);
    }

    #[test]
    fn first_step_moves_by_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut w = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[2], vec![1.0]);
        opt.step(&mut [&mut w], &[&g], 0.1);
        assert!((w.values()[0] - 0.9).abs() < 1e-6);
        assert!((w.values()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn scales_multiply_rates() {
        let mut a = Tensor::zeros(&[1]);
        let mut b = Tensor::zeros(&[1]);
        let g = Tensor::full(&[1], 1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &[1, 1], vec![1.0, 5.0]);
        opt.step(&mut [&mut a, &mut b], &[&g, &g], 0.01);
        assert_eq!(opt.last_rate(1), 5.0 * opt.last_rate(0));
        assert!((b.values()[0] / a.values()[0] - 5.0).abs() < 1e-9);
    }
}
