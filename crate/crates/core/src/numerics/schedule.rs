use serde::{Deserialize, Serialize};

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: u64) -> Self {
        LrSchedule {
            peak,
            total_steps,
            warmup_fraction: 0.10,
        }
    }

    /// Constant learning rate (no warmup, no decay).
    pub fn constant(peak: f64) -> Self {
        LrSchedule {
            peak,
            total_steps: 0,
            warmup_fraction: 0.0,
        }
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        if self.total_steps == 0 {
            return self.peak;
        }
        if t > self.total_steps {
            log::warn!(
                "schedule queried at step {t} beyond its end {}; clamping",
                self.total_steps
            );
            return 0.0;
        }
        let t = t as f64;
        let total = self.total_steps as f64;
        let warm = self.warmup_steps();
        if t < warm {
            return self.peak * t / warm;
        }
        let span = total - warm;
        if span <= 0.0 {
            return self.peak;
        }
        let progress = (t - warm) / span;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
