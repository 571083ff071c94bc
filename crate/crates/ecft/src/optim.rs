//! Adam over the flat parameter vector, global-norm gradient clipping,
//! and the two stage learning-rate schedules.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    /// Linear warmup to peak, then linear decay to zero at `total`.
    WarmupDecay { warmup: usize, total: usize },
    /// Start at peak, linear decay to zero at `total`.
    Decay { total: usize },
    Constant,
}

impl LrSchedule {
    /// Multiplier in [0, 1] applied to the peak learning rate at `step`
    /// (0-based: step 0 is the first update).
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::WarmupDecay { warmup, total } => {
                if step < warmup {
                    step as f64 / warmup as f64
                } else if step >= total {
                    0.0
                } else {
                    (total - step) as f64 / (total - warmup) as f64
                }
            }
            LrSchedule::Decay { total } => {
                if step >= total {
                    0.0
                } else {
                    (total - step) as f64 / total as f64
                }
            }
            LrSchedule::Constant => 1.0,
        }
    }
}

/// Scales `grad` so its L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub schedule: LrSchedule,
    pub step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, peak_lr: f64, clip_norm: f64, schedule: LrSchedule) -> Self {
        Adam {
            peak_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            schedule,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn lr(&self) -> f64 {
        self.peak_lr * self.schedule.factor(self.step)
    }

    /// One update: clip, advance moments, apply bias-corrected step.
    /// Returns the pre-clip gradient norm.
    pub fn apply(&mut self, params: &mut [f64], grad: &mut [f64]) -> f64 {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let norm = clip_global_norm(grad, self.clip_norm);
        let lr = self.lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        self.step += 1;
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_decay_endpoints() {
        let s = LrSchedule::WarmupDecay {
            warmup: 1024,
            total: 8192,
        };
        // baseline BT at step 512 -> half of peak
        assert!((s.factor(512) - 0.5).abs() < 1e-12);
        assert!((s.factor(1024) - 1.0).abs() < 1e-12);
        assert_eq!(s.factor(8192), 0.0);
        let d = LrSchedule::Decay { total: 100 };
        assert!((d.factor(0) - 1.0).abs() < 1e-12);
        assert!((d.factor(50) - 0.5).abs() < 1e-12);
        assert_eq!(d.factor(100), 0.0);
    }

    #[test]
    fn clip_preserves_direction() {
        let mut g = vec![3.0, 4.0];
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);
        let mut h = vec![0.3, 0.4];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h, vec![0.3, 0.4]);
    }

    #[test]
    fn adam_descends_quadratic() {
        // minimize sum((x - c)^2)
        let c = [1.0, -2.0, 0.5];
        let mut x = vec![0.0; 3];
        let mut opt = Adam::new(3, 0.05, 1e9, LrSchedule::Constant);
        for _ in 0..500 {
            let mut g: Vec<f64> = x.iter().zip(c.iter()).map(|(xi, ci)| 2.0 * (xi - ci)).collect();
            opt.apply(&mut x, &mut g);
        }
        for (xi, ci) in x.iter().zip(c.iter()) {
            assert!((xi - ci).abs() < 1e-2, "{xi} vs {ci}");
        }
    }
}
