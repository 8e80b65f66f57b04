use thiserror::Error;

/// Every failure the library can report. Variant names double as the
/// diagnostic tag printed by the command-line driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("required key column `{0}` is absent from the header")]
    MissingLevelColumn(String),
    #[error("duplicate key (item={item}, base={base}, equipment={equipment}, year={year})")]
    DuplicateKey {
        item: String,
        base: String,
        equipment: String,
        year: i64,
    },
    #[error("cell at line {line}, column `{column}` is not numeric: {value:?}")]
    NonNumericCell {
        line: usize,
        column: String,
        value: String,
    },
    #[error("feature `{0}` is missing in every record")]
    UnimputableFeature(String),
    #[error("need at least {needed} items, found {found}")]
    TooFewItems { needed: usize, found: usize },
    #[error("axis `{0}` has no members")]
    EmptyAxis(String),
    #[error("joint candidate space of size {size} exceeds the cap {cap}")]
    SpaceTooLarge { size: u128, cap: usize },
    #[error("item `{item}` has an incomplete (base x equipment x year) grid")]
    IncompleteGrid { item: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported stride {0}; expected 1 or 2")]
    UnsupportedStride(usize),
    #[error("non-finite loss at epoch {epoch}, step {step} ({phase})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        phase: &'static str,
    },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("length mismatch: {0} actual values vs {1} forecasts")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("negative value {0} where a demand count is required")]
    NegativeValue(f64),
    #[error("item `{0}` has no past demand history")]
    InsufficientHistory(String),
    #[error("no assignment satisfies the run-time budget")]
    Infeasible,
    #[error("brute force would enumerate {0} assignments")]
    InstanceTooLarge(u128),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("image encoding failed: {0}")]
    Image(String),
}

impl Error {
    /// Stable variant name for diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MissingLevelColumn(_) => "MissingLevelColumn",
            Error::DuplicateKey { .. } => "DuplicateKey",
            Error::NonNumericCell { .. } => "NonNumericCell",
            Error::UnimputableFeature(_) => "UnimputableFeature",
            Error::TooFewItems { .. } => "TooFewItems",
            Error::EmptyAxis(_) => "EmptyAxis",
            Error::SpaceTooLarge { .. } => "SpaceTooLarge",
            Error::IncompleteGrid { .. } => "IncompleteGrid",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::UnsupportedStride(_) => "UnsupportedStride",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::InvalidEpsilon(_) => "InvalidEpsilon",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::EmptyInput => "EmptyInput",
            Error::NegativeValue(_) => "NegativeValue",
            Error::InsufficientHistory(_) => "InsufficientHistory",
            Error::Infeasible => "Infeasible",
            Error::InstanceTooLarge(_) => "InstanceTooLarge",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
            Error::Image(_) => "Image",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
