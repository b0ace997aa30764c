use std::path::PathBuf;

/// Errors produced anywhere in the training and inference pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("action of dimension {dim} exceeds the padded maximum {max} for embodiment `{embodiment}`")]
    ActionTooWide {
        embodiment: String,
        dim: usize,
        max: usize,
    },

    #[error("degenerate action for embodiment `{0}`: dimension must be at least 1")]
    EmptyAction(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("token id {id} at position {position} is outside the reserved range [{lo}, {hi})")]
    TokenOutOfRange {
        position: usize,
        id: u32,
        lo: u32,
        hi: u32,
    },

    #[error("invalid action for space `{space}`: {detail}")]
    InvalidAction { space: String, detail: String },

    #[error("episode is done; reset before stepping")]
    EpisodeDone,

    #[error("sequence of length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("unknown word `{0}` in closed vocabulary")]
    UnknownWord(String),

    #[error("low-rank adapters already attached")]
    AdaptersAttached,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("rollout aborted in environment `{env}` at step {step}: {detail}")]
    Rollout { env: String, step: usize, detail: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("no successful episodes collected in {0} rollouts")]
    NoSuccesses(usize),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::ActionTooWide { .. } => "action_too_wide",
            Error::EmptyAction(_) => "empty_action",
            Error::NonFinite(_) => "non_finite",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::InvalidAction { .. } => "invalid_action",
            Error::EpisodeDone => "episode_done",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::UnknownWord(_) => "unknown_word",
            Error::AdaptersAttached => "adapters_attached",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Corrupt { .. } => "corrupt",
            Error::Io { .. } => "io",
            Error::Rollout { .. } => "rollout",
            Error::Divergence(_) => "divergence",
            Error::NoSuccesses(_) => "no_successes",
            Error::Internal(_) => "internal",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
