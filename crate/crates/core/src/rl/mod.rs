mod gae;
mod popart;
mod ppo;
mod rollout;
mod train;

pub use gae::{compute_gae, standardize};
pub use popart::PopArtStats;
pub use ppo::{clipped_surrogate, clipped_surrogate_grad, env_weights, ppo_losses, PpoConfig, PpoLosses, PpoSample};
pub use rollout::{collect_rollouts, EnvRunner, RolloutBatch, Transition};
pub use train::{train_rl, RlOutcome, RlRecord, RlRun};
