use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SapError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate class name `{0}` in catalog")]
    DuplicateClass(String),
    #[error("description provider failed for class `{class}`: {message}")]
    Provider { class: String, message: String },
    #[error("no cached descriptions for class `{class}` and no provider available (set SAP_LLM_API_KEY)")]
    MissingCredential { class: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("text exceeds encoder context ({tokens} tokens > {limit}): `{text}`")]
    TooLong {
        text: String,
        tokens: usize,
        limit: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("unsupported checkpoint format_version {found} (expected {expected})")]
    CheckpointVersion { found: String, expected: u32 },
    #[error("encoder config hash mismatch: checkpoint has {stored}, provided config has {provided}")]
    ConfigHashMismatch { stored: String, provided: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label space is empty")]
    EmptyLabelSpace,
    #[error("class `{0}` has no samples")]
    EmptyClass(String),
}

impl SapError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SapError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        SapError::Json {
            context: context.into(),
            source,
        }
    }
}
