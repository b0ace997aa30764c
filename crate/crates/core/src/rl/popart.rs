use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Linear;

/// Running return statistics with output-preserving rescaling of the value
/// head's final affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopArtStats {
    pub mu: f64,
    /// Running second moment.
    pub nu: f64,
    pub beta: f64,
    pub sigma_min: f64,
}

impl Default for PopArtStats {
    fn default() -> Self {
        PopArtStats::new(3e-4, 1e-4)
    }
}

impl PopArtStats {
    pub fn new(beta: f64, sigma_min: f64) -> Self {
        PopArtStats {
            mu: 0.0,
            nu: 1.0,
            beta,
            sigma_min,
        }
    }

    pub fn sigma(&self) -> f64 {
        (self.nu - self.mu * self.mu).max(self.sigma_min * self.sigma_min).sqrt()
    }

    pub fn normalize(&self, ret: f64) -> f64 {
        (ret - self.mu) / self.sigma()
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        value * self.sigma() + self.mu
    }

    /// Moves the statistics toward the batch moments of `returns` and rescales
    /// `head` (one output) so its unnormalized predictions are unchanged.
    pub fn update(&mut self, returns: &[f64], head: &mut Linear) -> Result<()> {
        if returns.is_empty() {
            return Ok(());
        }
        if let Some(r) = returns.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("return {r} in PopArt update")));
        }
        if head.out_dim() != 1 {
            return Err(Error::shape("popart", format!("value head has {} outputs", head.out_dim())));
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let second = returns.iter().map(|r| r * r).sum::<f64>() / n;
        let (mu_old, sigma_old) = (self.mu, self.sigma());
        self.mu = (1.0 - self.beta) * self.mu + self.beta * mean;
        self.nu = (1.0 - self.beta) * self.nu + self.beta * second;
        if self.nu - self.mu * self.mu < self.sigma_min * self.sigma_min {
            log::warn!("PopArt sigma below floor; clamped to {}", self.sigma_min);
        }
        let sigma = self.sigma();
        if self.mu == mu_old && sigma == sigma_old {
            return Ok(());
        }
        let ratio = sigma_old / sigma;
        head.weight.value.scale(ratio);
        if let Some(b) = &mut head.bias {
            let v = &mut b.value.data_mut()[0];
            *v = (*v * sigma_old + mu_old - self.mu) / sigma;
        }
        Ok(())
    }
}
