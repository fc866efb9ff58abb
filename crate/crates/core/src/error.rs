use thiserror::Error;

/// Every failure the library can report.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {x} lies outside the basis domain [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },

    #[error("model misuse: {0}")]
    ModelMisuse(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error(
        "lambda1 bracket exhausted: ratio {ratio:.6e} at boundary lambda1 = {lambda1:.6e} cannot reach gamma = {gamma:.6e}"
    )]
    BracketExhausted { lambda1: f64, ratio: f64, gamma: f64 },

    #[error("direction sampler retained no draws (gamma = {gamma:.6e}, lambda3 = {lambda3:.6e})")]
    DegenerateSampler { gamma: f64, lambda3: f64 },

    #[error("confidence region is empty at x0 = {x0}")]
    InfeasibleBand { x0: f64 },

    #[error("interior point solver did not converge after {iterations} iterations (duals {duals:?})")]
    SolverNonConvergence { iterations: usize, duals: [f64; 2] },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("rows with non-finite values: {0:?}")]
    NonFiniteRows(Vec<usize>),

    #[error("insufficient data: {rows} complete rows, need at least {needed}")]
    InsufficientData { rows: usize, needed: usize },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps `self` with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
