use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layers::Parameterized;
use super::tensor::Tensor;
use crate::error::{Error, Result};

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
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update with learning rate `lr` to every non-frozen parameter.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, lr: f64) -> Result<()> {
        self.step_filtered(model, lr, &|_| true)
    }

    /// As [`AdamW::step`], restricted to parameters whose name passes `select`.
    pub fn step_filtered<P: Parameterized + ?Sized>(
        &mut self,
        model: &mut P,
        lr: f64,
        select: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        let mut bad = None;
        model.visit_params("", &mut |name, p| {
            if bad.is_none() && !p.frozen && select(name) && !p.grad.all_finite() {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let moments = &mut self.moments;
        let mut shape_err = None;
        model.visit_params_mut("", &mut |name, p| {
            if p.frozen || !select(name) {
                return;
            }
            let m = moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: Tensor::zeros(p.value.shape()),
                second: Tensor::zeros(p.value.shape()),
            });
            if m.first.shape() != p.value.shape() {
                shape_err.get_or_insert_with(|| name.to_string());
                return;
            }
            let (w, g) = (p.value.data_mut(), p.grad.data());
            let (m1, m2) = (m.first.data_mut(), m.second.data_mut());
            for i in 0..w.len() {
                m1[i] = beta1 * m1[i] + (1.0 - beta1) * g[i];
                m2[i] = beta2 * m2[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m1[i] / bc1;
                let vhat = m2[i] / bc2;
                w[i] -= lr * weight_decay * w[i];
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        match shape_err {
            Some(name) => Err(Error::shape(
                "adamw",
                format!("moment buffer shape differs from parameter `{name}`"),
            )),
            None => Ok(()),
        }
    }
}

/// Scales the gradients of selected, non-frozen parameters so their global L2
/// norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameterized + ?Sized>(model: &mut P, max_norm: f64, select: &dyn Fn(&str) -> bool) -> f64 {
    let mut sq = 0.0;
    model.visit_params("", &mut |name, p| {
        if !p.frozen && select(name) {
            sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = max_norm / norm;
        model.visit_params_mut("", &mut |name, p| {
            if !p.frozen && select(name) {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::{join, Param};

    struct Scalar(Param);

    impl Parameterized for Scalar {
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
            f(&join(prefix, "w"), &self.0);
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f(&join(prefix, "w"), &mut self.0);
        }
    }

    fn scalar(w: f64, g: f64) -> Scalar {
        let mut p = Param::new(Tensor::from_vec(&[1], vec![w]).unwrap());
        p.grad.data_mut()[0] = g;
        Scalar(p)
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut s = scalar(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..5 {
            opt.step(&mut s, 0.1).unwrap();
        }
        assert_eq!(s.0.value.data()[0], 0.7);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.1, v = 0.001; bias-corrected both equal 1 → Δ = lr · 1 / (1 + ε).
        let mut s = scalar(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.0.value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_times_decay() {
        let mut s = scalar(2.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.0.value.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut s = scalar(1.0, f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut s, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(s.0.value.data()[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut s = scalar(1.0, 1.0);
        s.0.frozen = true;
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.0.value.data()[0], 1.0);
    }
}
