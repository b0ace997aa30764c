//! Dense tensors, the supported layer set with hand-derived gradients,
//! AdamW and learning-rate schedules.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod tensor;

pub use attention::CausalSelfAttention;
pub use graph::{ForwardBackward, Layer, Objective, Sequential};
pub use layers::{Activation, Embedding, LayerNorm, Linear, LoraAdapter, Param, Parameterized};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use schedule::LrSchedule;
pub use tensor::Tensor;
