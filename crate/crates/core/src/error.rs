use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    /// Internal consistency failure; valid parameters always give a positive definite matrix.
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("singular block: {0}")]
    SingularBlock(&'static str),
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("integration blew up at t = {t} s")]
    IntegrationBlowUp { t: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("basis `{id}` rejected: {reason}")]
    NonCompliant { id: String, reason: String },
    #[error("duplicate basis id `{0}`")]
    DuplicateId(String),
    #[error("unknown basis id `{0}`")]
    UnknownId(String),
    #[error("potential basis `{0}` has no primitive")]
    MissingPrimitive(String),
    #[error("basis `{0}` is PHI-only and cannot appear in a WOP set")]
    ModeMismatch(String),
    #[error("coefficient vector has length {got}, basis has {expected} functions")]
    CoefficientLength { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("json error in {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("unit configuration mismatch: {0}")]
    UnitMismatch(String),
    #[error("dataset is empty")]
    Empty,
    #[error("invalid value in {path} line {line}: {msg}")]
    InvalidValue { path: String, line: u64, msg: String },
    #[error("invalid trial {0}")]
    InvalidTrial(String),
    #[error("unknown task label `{0}`")]
    UnknownTask(String),
    #[error("scaling applies to stair-ascent trials only, got {0}")]
    NotStairAscent(String),
    #[error("invalid EMG record: {0}")]
    Emg(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("empty training set")]
    Empty,
    #[error("regressor and targets disagree: {0}")]
    Shape(String),
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("solver did not converge in {iterations} iterations (optimality residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("metric undefined: {0}")]
    Metric(&'static str),
    #[error("cross-validation needs at least two subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("task {0} is absent from every training subject")]
    TaskAbsent(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum ShapingError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trajectory and input sequence lengths differ ({trajectory} vs {inputs})")]
    LengthMismatch { trajectory: usize, inputs: usize },
    #[error("trajectory needs at least two samples")]
    TooShort,
}
