//! Crate-wide error type and exit-code mapping.

/// Errors produced by the toolkit.
///
/// The CLI maps these onto its exit-code contract: configuration problems
/// exit 2, data/format problems exit 3, remote failures exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    #[error("input error: {0}")]
    Input(String),

    /// Bad or inconsistent configuration (missing keyword, unknown attribute,
    /// answer word not a single vocabulary token, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A file failed to parse under one of the documented formats.
    #[error("format error in {path}{}: {message}", location.as_ref().map(|l| format!(" ({l})")).unwrap_or_default())]
    Format {
        path: String,
        /// "line 3" / "line 3 column 7" when known.
        location: Option<String>,
        message: String,
    },

    /// Parsed data violates an invariant (row not summing to 1, score out of
    /// range, missing default row, protocol size mismatch, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A context token is not part of the model's vocabulary.
    #[error("unknown token {token:?} not in model vocabulary")]
    UnknownToken { token: String },

    /// A remote endpoint could not be reached or replied with something the
    /// protocol does not allow. Carries the raw reply body when there is one.
    #[error("transport error: {message}")]
    Transport {
        message: String,
        raw: Option<String>,
        /// Seconds the server asked us to wait, if it sent a rate-limit header.
        retry_after: Option<u64>,
    },

    /// The model assigned zero total mass where a distribution was required.
    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    /// Pearson correlation over an input with zero variance.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// A scored token received probability zero during perplexity evaluation.
    #[error("infinite perplexity: token at corpus position {position} received probability 0")]
    InfinitePerplexity { position: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn transport(msg: impl Into<String>) -> Self {
        Error::Transport {
            message: msg.into(),
            raw: None,
            retry_after: None,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code under the CLI contract: 0 ok, 2 config, 3 data, 4 remote.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Transport { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
