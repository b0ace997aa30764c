use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::Action;
use crate::error::{Error, Result};

/// One recorded environment action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActionRecord {
    Discrete { text: String },
    Continuous { vec: Vec<f64> },
}

impl From<&Action> for ActionRecord {
    fn from(a: &Action) -> Self {
        match a {
            Action::Discrete(text) => ActionRecord::Discrete { text: text.clone() },
            Action::Continuous(vec) => ActionRecord::Continuous { vec: vec.clone() },
        }
    }
}

impl From<&ActionRecord> for Action {
    fn from(a: &ActionRecord) -> Self {
        match a {
            ActionRecord::Discrete { text } => Action::Discrete(text.clone()),
            ActionRecord::Continuous { vec } => Action::Continuous(vec.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub obs: Vec<f64>,
    pub action: ActionRecord,
    pub reward: f64,
}

/// One episode. Field order is the on-disk order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub domain: String,
    pub instruction: String,
    pub success: bool,
    pub source: String,
    pub steps: Vec<TrajectoryStep>,
}

pub fn write_trajectories(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for t in trajectories {
        let line = serde_json::to_string(t).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        if t.steps.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: trajectory `{}` has no steps", i + 1, t.id),
            });
        }
        out.push(t);
    }
    Ok(out)
}
