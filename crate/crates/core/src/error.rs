use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // constraint specs
    #[error("duplicate evidence name `{0}`")]
    DuplicateEvidence(String),
    #[error("unknown evidence name `{0}`")]
    UnknownEvidence(String),
    #[error("index out of range: {what} {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("evidence `{evidence}` directly supports both class {first} and class {second}")]
    OverlappingSupport {
        evidence: String,
        first: usize,
        second: usize,
    },
    #[error("evidence `{evidence}` is both incompatible with and directly supports class {class}")]
    SelfIncompatible { evidence: String, class: usize },
    #[error("unknown derivation rule `{0}`")]
    UnknownDerivation(String),
    #[error("constraint document names neither `incompatible` nor `derive`")]
    MissingIncompatibility,
    #[error("num_classes must be at least 1")]
    NoClasses,

    // shape and value checks
    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("evidence value must be -1 or +1, got {0}")]
    InvalidEvidenceValue(i64),
    #[error("probability out of range: {0}")]
    ProbabilityOutOfRange(f64),
    #[error("invalid posterior: {0}")]
    InvalidPosterior(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // autodiff
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("logsumexp of an empty list")]
    EmptyLogSumExp,
    #[error("cycle detected: node {node} references parent {parent}")]
    Cycle { node: usize, parent: usize },
    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),

    // training
    #[error("no training pairs available for label {0}")]
    NoPairsForLabel(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    // harness
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("grid point ({omega1}, {omega2}) is missing from {source_name}")]
    MissingGridPoint {
        omega1: f64,
        omega2: f64,
        source_name: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
