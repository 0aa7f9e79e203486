use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` has non-numeric value `{value}`")]
    NonNumericValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: sampling variance must be finite and > 0, got {value}")]
    NonPositiveVariance { row: usize, value: f64 },
    #[error("row {row}: sample size must be a positive integer, got `{value}`")]
    InvalidSampleSize { row: usize, value: String },
    #[error("row {row}: missing value in column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("binary covariate `{column}` has more than two levels ({levels:?})")]
    TooManyLevels { column: String, levels: Vec<String> },
    #[error("binary covariate `{column}`: reference level `{reference}` not observed")]
    UnknownReference { column: String, reference: String },
    #[error("covariate `{0}` is constant and cannot be standardized")]
    ZeroVariance(String),
    #[error("interaction {0}:{1} requires both main effects")]
    MarginalityViolation(usize, usize),
    #[error("covariate index {index} out of range (p = {p})")]
    IndexOutOfRange { index: usize, p: usize },
    #[error("interaction pair must join two distinct covariates, got ({0}, {0})")]
    SelfInteraction(usize),
    #[error("admissible-model count requested for p = {0}; supported up to p = 20")]
    Overflow(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("design is singular or ill-conditioned (condition number {condition:.3e})")]
    SingularDesign { condition: f64 },
    #[error("insufficient degrees of freedom: k = {k}, m = {m}")]
    InsufficientDf { k: usize, m: usize },
    #[error("standard error of coefficient {0} is zero")]
    ZeroStandardError(usize),
    #[error("AICc correction denominator is not positive (k = {k}, m = {m})")]
    DegenerateCorrection { k: usize, m: usize },
    #[error("need more than {min} studies, got {k}")]
    TooFewStudies { k: usize, min: usize },
    #[error("partition contains an empty group")]
    EmptyGroup,
    #[error("column `{0}` has no observed values to impute from")]
    AllMissingColumn(String),
    #[error("sample size missing for study {0}")]
    MissingSampleSize(usize),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("io: {0}")]
    Io(String),
    #[error("json: {0}")]
    Json(String),
}

/// Coarse error classes, used by the command line front end for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            SingularDesign { .. }
            | InsufficientDf { .. }
            | ZeroStandardError(_)
            | DegenerateCorrection { .. }
            | TooFewStudies { .. }
            | EmptyGroup
            | Overflow(_) => ErrorClass::Numerical,
            InvalidOption(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
