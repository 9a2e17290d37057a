use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid problem definition: {0}")]
    InvalidProblem(String),

    #[error("dynamics returned a non-finite value at stage {stage}")]
    NonFiniteDynamics { stage: usize },

    #[error("cost of player {player} is non-finite at stage {stage}")]
    NonFiniteCost { player: usize, stage: usize },

    #[error("non-finite {which} at stage {stage}")]
    NonFiniteDerivative { stage: usize, which: &'static str },

    #[error("analytic derivative `{0}` requested but not supplied")]
    MissingAnalytic(&'static str),

    /// The regularized stage game matrix `F + λI` had a pivot below the
    /// singularity threshold. Callers are expected to raise λ and retry.
    #[error("stage game at stage {stage} is numerically singular (pivot {pivot:e})")]
    SingularStageGame { stage: usize, pivot: f64 },

    #[error("Newton system is numerically singular (pivot {pivot:e})")]
    SingularNewtonSystem { pivot: f64 },

    #[error("dense Newton oracle needs {size} unknowns, above the cap of {cap}")]
    OracleCapExceeded { size: usize, cap: usize },

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("perturbation direction {index} is degenerate (zero norm)")]
    InvalidDirection { index: usize },

    #[error("invalid epsilon sweep: {0}")]
    InvalidEpsilons(String),

    #[error("need at least {needed} usable error values, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("inputs are not a certified equilibrium: residual {residual:e} > {tol:e}")]
    EquilibriumNotCertified { residual: f64, tol: f64 },

    #[error("unknown problem `{id}` (known: {known})")]
    UnknownProblem { id: String, known: String },

    #[error("bad problem parameter `{name}`: {reason}")]
    BadParameter { name: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    /// Re-tags a stage-game singularity with the stage it came from.
    pub(crate) fn at_stage(self, k: usize) -> Self {
        match self {
            Error::SingularStageGame { pivot, .. } => Error::SingularStageGame { stage: k, pivot },
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
