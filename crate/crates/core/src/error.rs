use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "Cholesky factorization failed after jitter escalation to {max_jitter:e} \
         (n = {size}, min diagonal = {min_diag:e}, max diagonal = {max_diag:e})"
    )]
    Cholesky {
        size: usize,
        max_jitter: f64,
        min_diag: f64,
        max_diag: f64,
    },

    #[error("hyperparameter optimization failed on all {} restarts: {}", .0.len(), .0.join("; "))]
    Optimization(Vec<String>),

    #[error("degenerate labels: classifier needs at least two distinct modes, found {0:?}")]
    DegenerateLabels(Vec<usize>),

    #[error("Newton iteration for the Laplace mode diverged; objective trace {0:?}")]
    NewtonDivergence(Vec<f64>),

    #[error("invalid mode {mode}: expected 1..={n_modes}")]
    InvalidMode { mode: usize, n_modes: usize },

    #[error("dimension {0} of the Hamiltonian gradient is unidentifiable from data")]
    Unidentifiable(usize),

    #[error("non-finite state at step {step}; last finite state {last_finite:?}")]
    NonFinite { step: usize, last_finite: Vec<f64> },

    #[error("overlapping port selection: port {0} used for both connection and external input")]
    OverlappingPorts(usize),

    #[error("unknown {kind} `{name}` (registered: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
