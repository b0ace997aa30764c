//! Generalist embodied agent pipeline at desk scale.

pub mod agent;
pub mod codec;
pub mod envs;
pub mod error;
pub mod numerics;
pub mod policy;
pub mod rl;
pub mod sft;
pub mod util;

pub use error::{Error, Result};
