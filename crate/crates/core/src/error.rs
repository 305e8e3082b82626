use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Cholesky failed; `pivot` is 1-based.
    #[error("matrix is not positive definite (failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("sites {first} and {second} coincide; the correlation matrix is singular (configure a nugget)")]
    CoincidentSites { first: usize, second: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("mode search did not converge after {iterations} iterations (gradient max-norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("all importance weights are zero or non-finite")]
    DegenerateWeights,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("chain ({k}, {l}) failed: {source}")]
    Chain {
        k: usize,
        l: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data { .. } | Error::Csv(_) => 3,
            Error::Domain(_)
            | Error::NotPositiveDefinite { .. }
            | Error::CoincidentSites { .. }
            | Error::NonConvergence { .. }
            | Error::DegenerateWeights
            | Error::Numerical(_) => 4,
            Error::Chain { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    /// Failures of the numerical machinery on otherwise valid input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::NonConvergence { .. } | Error::DegenerateWeights | Error::Numerical(_)
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Dimension(_) => "dimension",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::CoincidentSites { .. } => "coincident_sites",
            Error::Contract(_) => "contract",
            Error::NonConvergence { .. } => "non_convergence",
            Error::DegenerateWeights => "degenerate_weights",
            Error::Numerical(_) => "numerical",
            Error::Chain { .. } => "chain",
            Error::Config(_) => "config",
            Error::Data { .. } => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
