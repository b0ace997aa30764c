//! Central finite-difference gradient checks.

use std::collections::BTreeMap;

use super::{Parameterized, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_name: String,
    pub above_1e4: usize,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.above_1e4 += other.above_1e4;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_name = other.worst_name;
        }
    }

    /// < 1e-4 on at least 99.9% of coordinates and < 1e-3 on all.
    pub fn passes(&self) -> bool {
        self.checked > 0
            && self.worst < 1e-3
            && (self.above_1e4 as f64) <= 0.001 * self.checked as f64
    }

    pub fn assert_passes(&self, what: &str) {
        assert!(
            self.passes(),
            "{what}: gradient check failed: {} coords, {} above 1e-4, worst {:.3e} at {}",
            self.checked,
            self.above_1e4,
            self.worst,
            self.worst_name
        );
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn collect_grads<M: Parameterized>(model: &M) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    model.visit_params("", &mut |name, p| {
        if !p.frozen {
            out.insert(name.to_string(), p.grad.data().to_vec());
        }
    });
    out
}

fn nudge<M: Parameterized>(model: &mut M, name: &str, idx: usize, delta: f64) {
    model.visit_params_mut("", &mut |n, p| {
        if n == name {
            p.value.data_mut()[idx] += delta;
        }
    });
}

/// Compares the analytic parameter gradients produced by `backward` (which must
/// zero and then accumulate grads) against central differences of `loss`.
///
/// At most `max_per_param` coordinates are checked per parameter tensor, spread
/// evenly across it.
pub fn check_params<M: Parameterized>(
    model: &mut M,
    mut backward: impl FnMut(&mut M),
    loss: impl Fn(&M) -> f64,
    max_per_param: usize,
) -> GradReport {
    model.zero_grad();
    backward(model);
    let analytic = collect_grads(model);
    let mut report = GradReport::default();
    for (name, grads) in &analytic {
        let n = grads.len();
        let stride = (n / max_per_param.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            nudge(model, name, idx, FD_STEP);
            let up = loss(model);
            nudge(model, name, idx, -2.0 * FD_STEP);
            let down = loss(model);
            nudge(model, name, idx, FD_STEP);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(grads[idx], numeric);
            report.checked += 1;
            if e >= 1e-4 {
                report.above_1e4 += 1;
            }
            if e > report.worst {
                report.worst = e;
                report.worst_name = format!("{name}[{idx}] analytic {} numeric {numeric}", grads[idx]);
            }
        }
    }
    report
}

/// Central-difference check of an input gradient.
pub fn check_input(
    x: &Tensor,
    analytic: &Tensor,
    loss: impl Fn(&Tensor) -> f64,
) -> GradReport {
    let mut report = GradReport::default();
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let up = loss(&xp);
        xp.data_mut()[i] = orig - FD_STEP;
        let down = loss(&xp);
        xp.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = rel_err(analytic.data()[i], numeric);
        report.checked += 1;
        if e >= 1e-4 {
            report.above_1e4 += 1;
        }
        if e > report.worst {
            report.worst = e;
            report.worst_name = format!("input[{i}]");
        }
    }
    report
}
