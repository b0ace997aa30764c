use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, Step, PRIVILEGED_DIM, TEST_SEED_BASE};
use crate::error::{Error, Result};

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["ball", "box", "key"];
pub const GRID_ACTIONS: [&str; 4] = ["forward", "turn left", "turn right", "pick"];

/// `(color, shape)` index pairs never used as targets on training seeds.
pub const HELD_OUT_COMBOS: [(usize, usize); 2] = [(3, 2), (1, 1)];

const NUM_OBJECTS: usize = 3;
/// Color and shape one-hots, egocentric offsets, and the front-blocked flag.
const PER_OBJECT: usize = COLORS.len() + SHAPES.len() + 3;
pub(super) const OBS_DIM: usize = NUM_OBJECTS * PER_OBJECT;

const STEP_PENALTY: f64 = 0.01;
const SHAPING: f64 = 0.1;

/// East, south, west, north with `y` growing downwards.
const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridTask {
    GoTo,
    Pick,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Object {
    x: i64,
    y: i64,
    color: usize,
    shape: usize,
}

/// `N × N` room with three coloured objects; the agent must reach or pick up
/// the one named in the instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct GridNav {
    size: i64,
    sparse: bool,
    x: i64,
    y: i64,
    dir: usize,
    objects: Vec<Object>,
    target: usize,
    task: GridTask,
    instruction: String,
    steps: usize,
    max_steps: usize,
    done: bool,
}

impl GridNav {
    pub fn new(size: usize, sparse: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x6E41);
        let n = size as i64;
        let allowed: Vec<(usize, usize)> = (0..COLORS.len())
            .flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s)))
            .filter(|combo| seed >= TEST_SEED_BASE || !HELD_OUT_COMBOS.contains(combo))
            .collect();
        let target_combo = *allowed.choose(&mut rng).expect("non-empty combo set");
        let mut combos = vec![target_combo];
        while combos.len() < NUM_OBJECTS {
            let c = (rng.gen_range(0..COLORS.len()), rng.gen_range(0..SHAPES.len()));
            if !combos.contains(&c) {
                combos.push(c);
            }
        }
        let mut cells: Vec<(i64, i64)> = (0..n).flat_map(|x| (0..n).map(move |y| (x, y))).collect();
        cells.shuffle(&mut rng);
        let mut objects: Vec<Object> = combos
            .iter()
            .zip(&cells)
            .map(|(&(color, shape), &(x, y))| Object { x, y, color, shape })
            .collect();
        // Object order in the observation must not reveal the target.
        objects.shuffle(&mut rng);
        let target = objects
            .iter()
            .position(|o| (o.color, o.shape) == target_combo)
            .expect("target placed");
        let (x, y) = cells[NUM_OBJECTS];
        let dir = rng.gen_range(0..4);
        let task = if rng.gen_bool(0.5) { GridTask::GoTo } else { GridTask::Pick };
        let name = format!("{} {}", COLORS[target_combo.0], SHAPES[target_combo.1]);
        let instruction = match task {
            GridTask::GoTo => format!("go to the {name}"),
            GridTask::Pick => format!("pick up the {name}"),
        };
        GridNav {
            size: n,
            sparse,
            x,
            y,
            dir,
            objects,
            target,
            task,
            instruction,
            steps: 0,
            max_steps: 4 * size,
            done: false,
        }
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn task(&self) -> GridTask {
        self.task
    }

    pub fn agent(&self) -> (i64, i64, usize) {
        (self.x, self.y, self.dir)
    }

    pub fn target_cell(&self) -> (i64, i64) {
        let t = self.objects[self.target];
        (t.x, t.y)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    fn in_bounds(&self, x: i64, y: i64) -> bool {
        (0..self.size).contains(&x) && (0..self.size).contains(&y)
    }

    fn object_at(&self, x: i64, y: i64) -> Option<usize> {
        self.objects.iter().position(|o| o.x == x && o.y == y)
    }

    fn front(&self, x: i64, y: i64, dir: usize) -> (i64, i64) {
        (x + DIRS[dir].0, y + DIRS[dir].1)
    }

    fn target_distance(&self) -> i64 {
        let (tx, ty) = self.target_cell();
        (tx - self.x).abs() + (ty - self.y).abs()
    }

    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(OBS_DIM);
        let (fx, fy) = DIRS[self.dir];
        let (rx, ry) = DIRS[(self.dir + 1) % 4];
        let n = self.size as f64;
        let (ax, ay) = self.front(self.x, self.y, self.dir);
        let blocked = f64::from(u8::from(!self.in_bounds(ax, ay) || self.object_at(ax, ay).is_some()));
        for o in &self.objects {
            obs.extend((0..COLORS.len()).map(|c| f64::from(u8::from(c == o.color))));
            obs.extend((0..SHAPES.len()).map(|s| f64::from(u8::from(s == o.shape))));
            let (dx, dy) = (o.x - self.x, o.y - self.y);
            obs.push((dx * fx + dy * fy) as f64 / n);
            obs.push((dx * rx + dy * ry) as f64 / n);
            obs.push(blocked);
        }
        obs
    }

    pub fn privileged(&self) -> Vec<f64> {
        let n = self.size as f64;
        let (tx, ty) = self.target_cell();
        let mut p = vec![
            self.x as f64 / n,
            self.y as f64 / n,
            DIRS[self.dir].0 as f64,
            DIRS[self.dir].1 as f64,
            tx as f64 / n,
            ty as f64 / n,
            self.target_distance() as f64 / (2.0 * n),
            self.steps as f64 / self.max_steps as f64,
        ];
        p.resize(PRIVILEGED_DIM, 0.0);
        p
    }

    pub fn step(&mut self, action: &Action) -> Result<Step> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let text = match action {
            Action::Discrete(t) => t.as_str(),
            Action::Continuous(_) => {
                return Err(Error::InvalidAction {
                    space: "grid-agent".into(),
                    detail: "expected a discrete action".into(),
                })
            }
        };
        let before = self.target_distance();
        let mut success = false;
        match text {
            "forward" => {
                let (ax, ay) = self.front(self.x, self.y, self.dir);
                if self.in_bounds(ax, ay) {
                    match self.object_at(ax, ay) {
                        None => (self.x, self.y) = (ax, ay),
                        Some(i) if i == self.target && self.task == GridTask::GoTo => {
                            (self.x, self.y) = (ax, ay);
                            success = true;
                        }
                        Some(_) => {}
                    }
                }
            }
            "turn left" => self.dir = (self.dir + 3) % 4,
            "turn right" => self.dir = (self.dir + 1) % 4,
            "pick" => {
                let (ax, ay) = self.front(self.x, self.y, self.dir);
                if self.task == GridTask::Pick && self.object_at(ax, ay) == Some(self.target) {
                    success = true;
                }
            }
            other => {
                return Err(Error::InvalidAction {
                    space: "grid-agent".into(),
                    detail: format!("unknown action `{other}`"),
                })
            }
        }
        self.steps += 1;
        let mut reward = -STEP_PENALTY;
        if !self.sparse {
            reward += SHAPING * (before - self.target_distance()) as f64;
        }
        if success {
            reward += 1.0;
        }
        self.done = success || self.steps >= self.max_steps;
        Ok(Step {
            obs: self.observation(),
            reward,
            done: self.done,
            success,
        })
    }

    /// First action of a shortest path to the goal, found by breadth-first
    /// search over `(x, y, direction)`; ties prefer forward, left, right.
    pub fn expert_action(&self) -> Option<Action> {
        if self.done {
            return None;
        }
        let (tx, ty) = self.target_cell();
        let n = self.size as usize;
        let idx = |x: i64, y: i64, d: usize| ((y as usize * n) + x as usize) * 4 + d;
        let facing_target = |x: i64, y: i64, d: usize| self.front(x, y, d) == (tx, ty);
        let finish = match self.task {
            GridTask::GoTo => "forward",
            GridTask::Pick => "pick",
        };
        if facing_target(self.x, self.y, self.dir) {
            return Some(Action::Discrete(finish.into()));
        }
        let mut first: Vec<Option<&'static str>> = vec![None; n * n * 4];
        let mut seen = vec![false; n * n * 4];
        let mut queue = VecDeque::new();
        seen[idx(self.x, self.y, self.dir)] = true;
        queue.push_back((self.x, self.y, self.dir));
        while let Some((x, y, d)) = queue.pop_front() {
            let origin = first[idx(x, y, d)];
            let (fx, fy) = self.front(x, y, d);
            let mut next = Vec::with_capacity(3);
            if self.in_bounds(fx, fy) && self.object_at(fx, fy).is_none() {
                next.push(("forward", (fx, fy, d)));
            }
            next.push(("turn left", (x, y, (d + 3) % 4)));
            next.push(("turn right", (x, y, (d + 1) % 4)));
            for (name, (nx, ny, nd)) in next {
                let k = idx(nx, ny, nd);
                if seen[k] {
                    continue;
                }
                seen[k] = true;
                let o = origin.or(Some(name));
                if facing_target(nx, ny, nd) {
                    return o.map(|a| Action::Discrete(a.into()));
                }
                first[k] = o;
                queue.push_back((nx, ny, nd));
            }
        }
        None
    }
}
