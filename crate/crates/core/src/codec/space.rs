use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shared padded action width across all continuous embodiments.
pub const D_MAX: usize = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionKind {
    /// Language actions, e.g. `"turn left"` or `"pick up"`.
    Discrete { actions: Vec<String> },
    /// Bounded real vectors of a fixed dimension.
    Continuous {
        dim: usize,
        low: Vec<f64>,
        high: Vec<f64>,
    },
}

/// The action interface of one embodiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpaceSpec {
    pub embodiment: String,
    pub kind: ActionKind,
}

impl ActionSpaceSpec {
    pub fn discrete<S: Into<String>>(embodiment: &str, actions: Vec<S>) -> Result<Self> {
        let actions: Vec<String> = actions.into_iter().map(Into::into).collect();
        let spec = ActionSpaceSpec {
            embodiment: embodiment.to_string(),
            kind: ActionKind::Discrete { actions },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn continuous(embodiment: &str, low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        let spec = ActionSpaceSpec {
            embodiment: embodiment.to_string(),
            kind: ActionKind::Continuous {
                dim: low.len(),
                low,
                high,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::InvalidAction {
            space: self.embodiment.clone(),
            detail,
        };
        match &self.kind {
            ActionKind::Discrete { actions } => {
                if actions.is_empty() {
                    return Err(bad("discrete space has no actions".into()));
                }
                let mut seen = std::collections::HashSet::new();
                for a in actions {
                    if a.trim().is_empty() {
                        return Err(bad("empty action string".into()));
                    }
                    if !seen.insert(a.as_str()) {
                        return Err(bad(format!("duplicate action `{a}`")));
                    }
                }
            }
            ActionKind::Continuous { dim, low, high } => {
                if *dim == 0 {
                    return Err(Error::EmptyAction(self.embodiment.clone()));
                }
                if *dim > D_MAX {
                    return Err(Error::ActionTooWide {
                        embodiment: self.embodiment.clone(),
                        dim: *dim,
                        max: D_MAX,
                    });
                }
                if low.len() != *dim || high.len() != *dim {
                    return Err(bad("bounds length differs from dimension".into()));
                }
                if low.iter().zip(high).any(|(l, h)| !(l <= h)) {
                    return Err(bad("lower bound exceeds upper bound".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, ActionKind::Continuous { .. })
    }

    /// Continuous dimension, or `None` for discrete spaces.
    pub fn dim(&self) -> Option<usize> {
        match self.kind {
            ActionKind::Continuous { dim, .. } => Some(dim),
            ActionKind::Discrete { .. } => None,
        }
    }
}

/// A continuous action zero-padded to a shared width.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedAction {
    values: Vec<f64>,
    dim: usize,
}

impl PaddedAction {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Dimension of the action before padding.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }
}

/// Copies `action` into the first entries of a zero vector of width `d_max`.
pub fn pad(action: &[f64], d_max: usize, embodiment: &str) -> Result<PaddedAction> {
    if action.is_empty() {
        return Err(Error::EmptyAction(embodiment.to_string()));
    }
    if action.len() > d_max {
        return Err(Error::ActionTooWide {
            embodiment: embodiment.to_string(),
            dim: action.len(),
            max: d_max,
        });
    }
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("action for `{embodiment}`")));
    }
    let mut values = vec![0.0; d_max];
    values[..action.len()].copy_from_slice(action);
    Ok(PaddedAction {
        values,
        dim: action.len(),
    })
}

/// Keeps the first `d` entries of a decoded padded vector.
pub fn truncate(decoded: &[f64], d: usize) -> Result<Vec<f64>> {
    if d > decoded.len() {
        return Err(Error::shape(
            "truncate",
            format!("cannot keep {d} entries of a {}-vector", decoded.len()),
        ));
    }
    Ok(decoded[..d].to_vec())
}
