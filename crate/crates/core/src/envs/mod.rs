//! Goal-specified toy environments with scripted experts.

mod gridnav;
mod reacher;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gridnav::{GridNav, GridTask, COLORS, GRID_ACTIONS, HELD_OUT_COMBOS, SHAPES};
pub use reacher::{forward_kinematics, max_joint_speed, wrap_angle, Reacher, REACHER_COLORS};

use crate::codec::{ActionKind, ActionSpaceSpec};
use crate::error::{Error, Result};
use crate::sft::trajectory::{write_trajectories, ActionRecord, Trajectory, TrajectoryStep};

/// Seeds at or above this value form the held-out test split.
pub const TEST_SEED_BASE: u64 = 1_000_000;

/// Width of the privileged feature vector offered to the value head.
pub const PRIVILEGED_DIM: usize = 8;

/// An action as the environment consumes it.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(String),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Random-policy and expert success rates used for score normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub random: f64,
    pub expert: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    GridNav { size: usize, sparse: bool },
    Reacher { links: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub space: ActionSpaceSpec,
    pub obs_dim: usize,
    pub max_steps: usize,
    pub reward: &'static str,
    pub reference: Option<ReferenceScores>,
    family: Family,
}

pub const ENV_NAMES: [&str; 5] = ["gridnav8", "gridnav8-sparse", "reacher2", "reacher4", "reacher7"];

impl EnvSpec {
    /// Domain label shared by every variant of an environment family.
    pub fn domain(&self) -> &'static str {
        match self.family {
            Family::GridNav { .. } => "gridnav",
            Family::Reacher { .. } => "reacher",
        }
    }

    pub fn reset(&self, seed: u64) -> Episode {
        match self.family {
            Family::GridNav { size, sparse } => Episode::GridNav(GridNav::new(size, sparse, seed)),
            Family::Reacher { links } => Episode::Reacher(Reacher::new(links, seed)),
        }
    }
}

/// Looks up a built-in environment by name.
pub fn env_spec(name: &str) -> Result<EnvSpec> {
    let (family, reward) = match name {
        "gridnav8" => (
            Family::GridNav { size: 8, sparse: false },
            "+1 on success, -0.01 per step, 0.1 x decrease in Manhattan distance to the target",
        ),
        "gridnav8-sparse" => (
            Family::GridNav { size: 8, sparse: true },
            "+1 on success, -0.01 per step",
        ),
        "reacher2" => (Family::Reacher { links: 2 }, "decrease in end-effector distance, +1 on success"),
        "reacher4" => (Family::Reacher { links: 4 }, "decrease in end-effector distance, +1 on success"),
        "reacher7" => (Family::Reacher { links: 7 }, "decrease in end-effector distance, +1 on success"),
        other => {
            return Err(Error::Config(format!(
                "unknown environment `{other}` (known: {})",
                ENV_NAMES.join(", ")
            )))
        }
    };
    let (space, obs_dim, max_steps) = match family {
        Family::GridNav { size, .. } => (
            ActionSpaceSpec::discrete("grid-agent", GRID_ACTIONS.to_vec())?,
            gridnav::OBS_DIM,
            4 * size,
        ),
        Family::Reacher { links } => (
            ActionSpaceSpec::continuous(&format!("reacher-{links}"), vec![-1.0; links], vec![1.0; links])?,
            reacher::obs_dim(links),
            reacher::MAX_STEPS,
        ),
    };
    Ok(EnvSpec {
        name: name.to_string(),
        space,
        obs_dim,
        max_steps,
        reward,
        reference: Some(reference_scores(family)),
        family,
    })
}

fn reference_scores(family: Family) -> ReferenceScores {
    // Measured with `measure_reference` over 200 test-split episodes; the
    // `references_match_measurement` test keeps these in sync.
    match family {
        Family::GridNav { .. } => ReferenceScores { random: 0.065, expert: 1.0 },
        Family::Reacher { links: 2 } => ReferenceScores { random: 0.1, expert: 0.995 },
        Family::Reacher { links: 4 } => ReferenceScores { random: 0.045, expert: 1.0 },
        Family::Reacher { .. } => ReferenceScores { random: 0.005, expert: 0.97 },
    }
}

/// A running episode of any built-in environment.
#[derive(Clone, Debug, PartialEq)]
pub enum Episode {
    GridNav(GridNav),
    Reacher(Reacher),
}

impl Episode {
    pub fn instruction(&self) -> &str {
        match self {
            Episode::GridNav(e) => e.instruction(),
            Episode::Reacher(e) => e.instruction(),
        }
    }

    pub fn observation(&self) -> Vec<f64> {
        match self {
            Episode::GridNav(e) => e.observation(),
            Episode::Reacher(e) => e.observation(),
        }
    }

    /// Task state the policy never sees; available to the value head.
    pub fn privileged(&self) -> Vec<f64> {
        match self {
            Episode::GridNav(e) => e.privileged(),
            Episode::Reacher(e) => e.privileged(),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<Step> {
        match self {
            Episode::GridNav(e) => e.step(action),
            Episode::Reacher(e) => e.step(action),
        }
    }

    /// The scripted expert's next action, or `None` when the instance is
    /// unsolvable.
    pub fn expert_action(&self) -> Option<Action> {
        match self {
            Episode::GridNav(e) => e.expert_action(),
            Episode::Reacher(e) => Some(e.expert_action()),
        }
    }

    pub fn is_done(&self) -> bool {
        match self {
            Episode::GridNav(e) => e.is_done(),
            Episode::Reacher(e) => e.is_done(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        match self {
            Episode::GridNav(e) => e.steps_taken(),
            Episode::Reacher(e) => e.steps_taken(),
        }
    }
}

/// Uniformly random valid action.
pub fn random_action(space: &ActionSpaceSpec, rng: &mut impl Rng) -> Action {
    match &space.kind {
        ActionKind::Discrete { actions } => Action::Discrete(actions[rng.gen_range(0..actions.len())].clone()),
        ActionKind::Continuous { low, high, .. } => Action::Continuous(
            low.iter().zip(high).map(|(&l, &h)| rng.gen_range(l..=h)).collect(),
        ),
    }
}

/// Outcome of one complete episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub total_return: f64,
    pub steps: usize,
}

/// Runs the expert from `seed`; `None` when the instance is unsolvable.
pub fn expert_trajectory(spec: &EnvSpec, seed: u64) -> Result<Option<Trajectory>> {
    let mut ep = spec.reset(seed);
    let instruction = ep.instruction().to_string();
    let mut steps = Vec::new();
    let mut success = false;
    while !ep.is_done() {
        let Some(action) = ep.expert_action() else {
            return Ok(None);
        };
        let obs = ep.observation();
        let out = ep.step(&action)?;
        steps.push(TrajectoryStep {
            obs,
            action: ActionRecord::from(&action),
            reward: out.reward,
        });
        success = out.success;
    }
    Ok(Some(Trajectory {
        id: format!("{}-{seed}", spec.name),
        domain: spec.domain().to_string(),
        instruction,
        success,
        source: "expert".into(),
        steps,
    }))
}

/// Collects `n` successful expert episodes starting at `first_seed`, skipping
/// unsolvable or failed instances.
pub fn expert_dataset(spec: &EnvSpec, n: usize, first_seed: u64) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(n);
    let mut seed = first_seed;
    let mut skipped = 0usize;
    while out.len() < n {
        match expert_trajectory(spec, seed)? {
            Some(t) if t.success => out.push(t),
            _ => skipped += 1,
        }
        seed += 1;
        if skipped > 10 * n + 100 {
            return Err(Error::Internal(format!(
                "expert for {} failed on {skipped} instances",
                spec.name
            )));
        }
    }
    if skipped > 0 {
        log::info!("{}: skipped {skipped} unsolved instances", spec.name);
    }
    Ok(out)
}

/// Writes `n` expert trajectories as line-delimited records.
pub fn generate_dataset(spec: &EnvSpec, n: usize, first_seed: u64, path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let data = expert_dataset(spec, n, first_seed)?;
    write_trajectories(path, &data)?;
    Ok(data)
}

/// Success rate and mean return of a uniformly random policy.
pub fn random_policy_outcomes(spec: &EnvSpec, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<EpisodeOutcome>> {
    seeds
        .into_iter()
        .map(|seed| {
            let mut ep = spec.reset(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
            let mut out = EpisodeOutcome {
                success: false,
                total_return: 0.0,
                steps: 0,
            };
            while !ep.is_done() {
                let s = ep.step(&random_action(&spec.space, &mut rng))?;
                out.total_return += s.reward;
                out.success = s.success;
                out.steps += 1;
            }
            Ok(out)
        })
        .collect()
}

/// Success rate of the random policy and of the expert over the given seeds.
pub fn measure_reference(spec: &EnvSpec, seeds: std::ops::Range<u64>) -> Result<ReferenceScores> {
    let n = (seeds.end - seeds.start) as f64;
    let random = random_policy_outcomes(spec, seeds.clone())?
        .iter()
        .filter(|o| o.success)
        .count() as f64
        / n;
    let mut expert = 0.0;
    for seed in seeds {
        if let Some(t) = expert_trajectory(spec, seed)? {
            if t.success {
                expert += 1.0;
            }
        }
    }
    Ok(ReferenceScores {
        random,
        expert: expert / n,
    })
}
