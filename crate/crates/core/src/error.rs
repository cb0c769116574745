use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("corrupt feature record {index}: {reason}")]
    CorruptFeature { index: usize, reason: String },
    #[error("corrupt region: {0}")]
    CorruptRegion(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("degenerate feature (zero or non-finite vector)")]
    DegenerateFeature,
    #[error("numerical failure at step {step}: {what}")]
    NumericalFailure { step: usize, what: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("render state does not match the scene/camera it is applied to")]
    StaleState,
    #[error("no supervised pixels in index map")]
    EmptySupervision,
    #[error("query set is empty")]
    EmptyQuerySet,
    #[error("no codebook category passed the selection threshold for query `{0}`")]
    EmptySelection(String),
    #[error("scene generation failed: {0}")]
    GenerationFailure(String),
    #[error("no valid feature pair")]
    EmptyPairSet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingArtifact(path.display().to_string());
        }
        Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingArtifact(_) => "MissingArtifact",
            Error::SchemaViolation(_) => "SchemaViolation",
            Error::CorruptFeature { .. } => "CorruptFeature",
            Error::CorruptRegion(_) => "CorruptRegion",
            Error::ShapeError(_) => "ShapeError",
            Error::DegenerateFeature => "DegenerateFeature",
            Error::NumericalFailure { .. } => "NumericalFailure",
            Error::EmptyDataset(_) => "EmptyDataset",
            Error::StaleState => "StaleState",
            Error::EmptySupervision => "EmptySupervision",
            Error::EmptyQuerySet => "EmptyQuerySet",
            Error::EmptySelection(_) => "EmptySelection",
            Error::GenerationFailure(_) => "GenerationFailure",
            Error::EmptyPairSet => "EmptyPairSet",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io { .. } => "Io",
            Error::Json { .. } => "Json",
            Error::Image(_) => "Image",
        }
    }
}
