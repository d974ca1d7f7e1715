use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report.
///
/// Each variant maps to a stable, upper-case error code (see [`Error::code`])
/// which the command-line front-end prints on standard error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate image id `{0}`")]
    DuplicateImageId(String),
    #[error("individual `{individual}` has conflicting labels {first} and {second}")]
    LabelConflict {
        individual: String,
        first: u8,
        second: u8,
    },
    #[error("value `{value}` is not valid for field `{field}`")]
    BadEnum { field: &'static str, value: String },
    #[error("missing or malformed field `{field}` in row {row}")]
    MissingField { field: String, row: usize },
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("failed to write `{path}`: {source}")]
    IoWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to read `{path}`: {source}")]
    IoRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad resize target {0}")]
    BadTarget(usize),
    #[error("crop of {size} does not fit a {height}x{width} image")]
    CropTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("checkpoint shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    CheckpointShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint `{path}`: {reason}")]
    CheckpointIo { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("output heads do not match targets: {0}")]
    ModeMismatch(String),
    #[error("only one class present")]
    OneClassOnly,
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("no prediction metadata for individual of image `{0}`")]
    UnknownIndividual(String),
    #[error("individual `{0}` has no images")]
    NoImages(String),
    #[error("empty input")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateImageId(_) => "DUPLICATE_IMAGE_ID",
            Error::LabelConflict { .. } => "LABEL_CONFLICT",
            Error::BadEnum { .. } => "BAD_ENUM",
            Error::MissingField { .. } => "MISSING_FIELD",
            Error::EmptyCohort => "EMPTY_COHORT",
            Error::InvalidConfig(_) => "INVALID_CONFIG",
            Error::IoWrite { .. } => "IO_WRITE_FAILURE",
            Error::IoRead { .. } => "IO_READ_FAILURE",
            Error::BadTarget(_) => "BAD_TARGET",
            Error::CropTooLarge { .. } => "CROP_TOO_LARGE",
            Error::CheckpointShapeMismatch { .. } => "CHECKPOINT_SHAPE_MISMATCH",
            Error::CheckpointIo { .. } => "CHECKPOINT_IO",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::ModeMismatch(_) => "MODE_MISMATCH",
            Error::OneClassOnly => "ONE_CLASS_ONLY",
            Error::Divergence { .. } => "DIVERGENCE",
            Error::UnknownIndividual(_) => "UNKNOWN_INDIVIDUAL",
            Error::NoImages(_) => "NO_IMAGES",
            Error::Empty => "EMPTY",
            Error::Csv(_) => "CSV_FORMAT",
            Error::Image(_) => "IMAGE_CODEC",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
