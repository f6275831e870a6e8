use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("support mismatch: p[{index}] = {p} > 0 but q[{index}] = 0")]
    SupportMismatch { index: usize, p: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("invalid fraction {0}: must lie in (0, 1]")]
    InvalidFraction(f64),

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("belief mode `{0}` is not supported by this tracker")]
    ModeUnsupported(String),

    #[error("missing label: {0}")]
    MissingLabel(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown system action: {0}")]
    UnknownSystemAction(String),

    #[error("feature length mismatch: policy expects {expected}, got {got}")]
    FeatureLength { expected: usize, got: usize },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("checkpoint checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("checkpoint fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("missing artifact {what}: expected at {path}")]
    MissingArtifact { what: String, path: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used for machine-readable CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidDistribution(_) => "invalid_distribution",
            Error::SupportMismatch { .. } => "support_mismatch",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Domain(_) => "domain",
            Error::EmptyEnsemble => "empty_ensemble",
            Error::InvalidFraction(_) => "invalid_fraction",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::DegenerateEnsemble(_) => "degenerate_ensemble",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::TapeConsumed => "tape_consumed",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::DuplicateParameter(_) => "duplicate_parameter",
            Error::UnknownToken(_) => "unknown_token",
            Error::ModeUnsupported(_) => "mode_unsupported",
            Error::MissingLabel(_) => "missing_label",
            Error::EmptyInput(_) => "empty_input",
            Error::Config(_) => "invalid_config",
            Error::UnknownSystemAction(_) => "unknown_system_action",
            Error::FeatureLength { .. } => "feature_length",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::Checksum(_) => "checksum",
            Error::Fingerprint { .. } => "fingerprint",
            Error::Format(_) => "format",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
