use thiserror::Error;

use crate::feature_model::{GroupKey, ValidationReport};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate atom: coupled system determinant {det:e} is below tolerance")]
    DegenerateAtom { det: f64 },
    #[error("every candidate in the group is already selected")]
    Exhausted,
    #[error("group {0} has no records")]
    EmptyGroup(GroupKey),
    #[error("group {group}: {source}")]
    InGroup {
        group: GroupKey,
        #[source]
        source: Box<Error>,
    },
    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("no prototypes for group {0}")]
    MissingPrototypes(GroupKey),
    #[error("record {0} has no logits")]
    MissingLogits(usize),
    #[error("requested {k} bases but group has only {n} instances")]
    KTooLarge { k: usize, n: usize },
    #[error("basis selection is empty")]
    EmptyBasis,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("feature set failed validation ({} violations)", .0.violations.len())]
    Invalid(ValidationReport),
    #[error("bad magic: expected PFS1")]
    BadMagic,
    #[error("payload truncated: need {needed} bytes, have {available}")]
    TruncatedPayload { needed: usize, available: usize },
    #[error("unsupported container version {0}")]
    VersionUnsupported(u16),
    #[error("payload length mismatch: header implies {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("csv schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Stable machine-readable code, printed by the CLI and mirrored by the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DegenerateAtom { .. } => "DegenerateAtom",
            Error::Exhausted => "Exhausted",
            Error::EmptyGroup(_) => "EmptyGroup",
            Error::InGroup { source, .. } => source.code(),
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::MissingPrototypes(_) => "MissingPrototypes",
            Error::MissingLogits(_) => "MissingLogits",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::EmptyBasis => "EmptyBasis",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Invalid(_) => "InvalidFeatureSet",
            Error::BadMagic => "BadMagic",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::Malformed(_) => "Malformed",
            Error::SchemaMismatch(_) => "SchemaMismatch",
            Error::Parse { .. } => "ParseError",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
            Error::Toml(_) => "ConfigParse",
        }
    }

    pub(crate) fn in_group(self, group: GroupKey) -> Error {
        match self {
            e @ Error::InGroup { .. } => e,
            e => Error::InGroup {
                group,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error with group tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::InGroup { source, .. } => source.root(),
            e => e,
        }
    }
}
