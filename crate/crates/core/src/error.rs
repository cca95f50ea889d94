use thiserror::Error;

pub type Result<T, E = ApbError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ApbError {
    #[error("empty attention row {row}: no unmasked key")]
    EmptyAttentionRow { row: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scorer weights unavailable for layer {layer}")]
    ScorerWeightsUnavailable { layer: usize },

    #[error("deadlock in round {round}: {kind} expected {expected} participants, got {got}")]
    Deadlock {
        round: u64,
        kind: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("weights file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ApbError {
    /// Process exit code for the CLI: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ApbError::Config(_) | ApbError::Format(_) | ApbError::Io { .. } => 2,
            _ => 3,
        }
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> ApbError {
    ApbError::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> ApbError {
    ApbError::Config(msg.into())
}
