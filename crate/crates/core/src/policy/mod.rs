//! Causal sequence policy over text and action tokens with constrained
//! decoding, low-rank adapters, and a value head.

mod checkpoint;
mod decode;
mod layout;
mod model;
mod trie;
mod vocab;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, PolicyCheckpoint, TrainerState,
    POLICY_MAGIC, POLICY_VERSION,
};
pub use decode::{
    action_token_logprobs, constrained_step, decode_action, masked_token_stats, DecodedAction, MaskedDistribution,
    MaskedTokenStats, StepChoice,
};
pub use layout::{obs_tokens, FlatSequence, SequenceLayout, StepGroup, OBS_CHUNK};
pub use model::{is_adapter, is_value_param, Block, LoraSettings, PolicyConfig, PolicyModel, Trunk, TrunkCache};
pub use trie::{ActionTrie, TrieCursor};
pub use vocab::{Vocabulary, BUILTIN_WORDS, END_ACTION, OBSERVATION, PAD};
