use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, Step, PRIVILEGED_DIM};
use crate::error::{Error, Result};

pub const REACHER_COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];

pub(super) const MAX_STEPS: usize = 100;
const SUCCESS_RADIUS: f64 = 0.1;
const MIN_START_DISTANCE: f64 = 0.3;
const STEP_SIZES: [f64; 7] = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];

pub(super) fn obs_dim(links: usize) -> usize {
    2 * links + 6
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Planar arm with `k` unit links; actions are joint velocities in `[-1, 1]^k`
/// scaled by the per-arm maximum joint speed.
#[derive(Clone, Debug, PartialEq)]
pub struct Reacher {
    joints: Vec<f64>,
    target: [f64; 2],
    instruction: String,
    max_speed: f64,
    steps: usize,
    done: bool,
}

impl Reacher {
    pub fn new(links: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ links as u64);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..links).map(|_| wrap_angle(rng.gen_range(-PI..PI))).collect()
        };
        let (joints, target) = loop {
            let joints = sample(&mut rng);
            let target = forward_kinematics(&sample(&mut rng));
            let ee = forward_kinematics(&joints);
            if dist(ee, target) > MIN_START_DISTANCE {
                break (joints, target);
            }
        };
        let color = REACHER_COLORS[rng.gen_range(0..REACHER_COLORS.len())];
        Reacher {
            joints,
            target,
            instruction: format!("reach the {color} target"),
            max_speed: max_joint_speed(links),
            steps: 0,
            done: false,
        }
    }

    pub fn links(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[f64] {
        &self.joints
    }

    pub fn target(&self) -> [f64; 2] {
        self.target
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn end_effector(&self) -> [f64; 2] {
        forward_kinematics(&self.joints)
    }

    pub fn distance(&self) -> f64 {
        dist(self.end_effector(), self.target)
    }

    pub fn observation(&self) -> Vec<f64> {
        let k = self.links() as f64;
        let ee = self.end_effector();
        let mut obs: Vec<f64> = self.joints.iter().map(|t| t.sin()).collect();
        obs.extend(self.joints.iter().map(|t| t.cos()));
        obs.extend([ee[0] / k, ee[1] / k, self.target[0] / k, self.target[1] / k]);
        obs.extend([(self.target[0] - ee[0]) / k, (self.target[1] - ee[1]) / k]);
        obs
    }

    pub fn privileged(&self) -> Vec<f64> {
        let k = self.links() as f64;
        let ee = self.end_effector();
        let mut p = vec![
            ee[0] / k,
            ee[1] / k,
            self.target[0] / k,
            self.target[1] / k,
            self.distance() / k,
            self.steps as f64 / MAX_STEPS as f64,
        ];
        p.resize(PRIVILEGED_DIM, 0.0);
        p
    }

    fn space_name(&self) -> String {
        format!("reacher-{}", self.links())
    }

    fn apply(&self, joints: &mut [f64], action: &[f64]) {
        for (t, a) in joints.iter_mut().zip(action) {
            *t = wrap_angle(*t + a.clamp(-1.0, 1.0) * self.max_speed);
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<Step> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = match action {
            Action::Continuous(v) => v,
            Action::Discrete(_) => {
                return Err(Error::InvalidAction {
                    space: self.space_name(),
                    detail: "expected a continuous action".into(),
                })
            }
        };
        if a.len() != self.links() {
            return Err(Error::InvalidAction {
                space: self.space_name(),
                detail: format!("expected {} joint velocities, got {}", self.links(), a.len()),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidAction {
                space: self.space_name(),
                detail: "non-finite joint velocity".into(),
            });
        }
        let before = self.distance();
        let mut joints = std::mem::take(&mut self.joints);
        self.apply(&mut joints, a);
        self.joints = joints;
        self.steps += 1;
        let after = self.distance();
        let success = after < SUCCESS_RADIUS;
        let mut reward = before - after;
        if success {
            reward += 1.0;
        }
        self.done = success || self.steps >= MAX_STEPS;
        Ok(Step {
            obs: self.observation(),
            reward,
            done: self.done,
            success,
        })
    }

    /// Moves along the normalized negative distance gradient, with the step
    /// size chosen from a fixed candidate set by direct evaluation.
    pub fn expert_action(&self) -> Action {
        let ee = self.end_effector();
        let d = dist(ee, self.target).max(1e-12);
        let (ex, ey) = ((ee[0] - self.target[0]) / d, (ee[1] - self.target[1]) / d);
        let k = self.links();
        let mut grad = vec![0.0; k];
        let mut phi = 0.0;
        let mut partial = Vec::with_capacity(k);
        for &t in &self.joints {
            phi += t;
            partial.push((-phi.sin(), phi.cos()));
        }
        // d ee / d θ_j sums the contributions of links j..k.
        let (mut sx, mut sy) = (0.0, 0.0);
        for j in (0..k).rev() {
            sx += partial[j].0;
            sy += partial[j].1;
            grad[j] = sx * ex + sy * ey;
        }
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let dir: Vec<f64> = if gmax < 1e-9 {
            let mut v = vec![0.0; k];
            v[0] = 1.0;
            v
        } else {
            grad.iter().map(|g| -g / gmax).collect()
        };
        let mut best = (d, vec![0.0; k]);
        for s in STEP_SIZES {
            let a: Vec<f64> = dir.iter().map(|v| v * s).collect();
            let mut j = self.joints.clone();
            self.apply(&mut j, &a);
            let nd = dist(forward_kinematics(&j), self.target);
            if nd < best.0 {
                best = (nd, a);
            }
        }
        Action::Continuous(best.1)
    }
}

/// Largest joint step per unit action; keeps end-effector motion per step
/// comparable across arm lengths.
pub fn max_joint_speed(links: usize) -> f64 {
    (2.0 / (links * (links + 1)) as f64).min(0.2)
}

/// End-effector position of a planar arm with unit links.
pub fn forward_kinematics(joints: &[f64]) -> [f64; 2] {
    let mut phi = 0.0;
    let (mut x, mut y) = (0.0, 0.0);
    for &t in joints {
        phi += t;
        x += phi.cos();
        y += phi.sin();
    }
    [x, y]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_lands_in_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        for i in -50..50 {
            let w = wrap_angle(i as f64 * 0.77);
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        let mut r = Reacher::new(2, 5);
        let before = r.observation();
        let s = r.step(&Action::Continuous(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.obs, before);
        assert_eq!(s.reward, 0.0);
        assert!(!s.done);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let mut r = Reacher::new(4, 5);
        match r.step(&Action::Continuous(vec![0.0; 3])) {
            Err(Error::InvalidAction { space, .. }) => assert_eq!(space, "reacher-4"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn speeds_shrink_with_arm_length() {
        assert_eq!(max_joint_speed(2), 0.2);
        assert!((max_joint_speed(4) - 0.1).abs() < 1e-15);
        assert!(max_joint_speed(7) < max_joint_speed(4));
    }
}
