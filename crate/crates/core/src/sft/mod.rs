mod batch;
mod train;
pub mod trajectory;

pub use batch::{
    dataset_sampler, sample_batch, sft_loss, sft_loss_and_grad, SftBatch, SftDataset, TokenizedTrajectory,
};
pub use train::{success_filtered_sft, train_sft, FilterStats, SftConfig, SftEval, SftRecord, SftRun};
pub use trajectory::{read_trajectories, write_trajectories, ActionRecord, Trajectory, TrajectoryStep};
