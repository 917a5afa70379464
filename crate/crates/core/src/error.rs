//! Error type shared by model construction and all solvers.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building a model or running a solver.
///
/// Numeric payloads are stored as `f64` regardless of the scalar type the
/// computation ran in; they exist for diagnostics, not further arithmetic.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix not symmetric: {0}")]
    NonSymmetric(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("matrix not positive semidefinite: {0}")]
    NotPsd(String),

    #[error(
        "joint covariance not positive semidefinite: residual state covariance \
         has eigenvalue {eigenvalue:e}"
    )]
    JointCovarianceNotPsd { eigenvalue: f64 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("observation symbol {index} has zero probability")]
    ZeroProbabilityObservation { index: usize },

    #[error("negative distortion entry {value:e} at ({row}, {col})")]
    NegativeDistortion { row: usize, col: usize, value: f64 },

    #[error("infeasible budgets: {0}")]
    InfeasibleBudget(String),

    #[error("budgets {budgets:?} below minimal achievable distortions {min_achievable:?}")]
    Infeasible {
        min_achievable: Vec<f64>,
        budgets: Vec<f64>,
    },

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error(
        "matrices do not commute: relative commutator norm {commutator:e} \
         exceeds tolerance {tolerance:e}"
    )]
    NotDiagonalizable { commutator: f64, tolerance: f64 },

    #[error("spectrum entry {index} is not positive: {value:e}")]
    NonPositiveSigma { index: usize, value: f64 },

    #[error("root finding failed: {0}")]
    RootFindingFailure(String),

    #[error("Newton iteration failed: {0}")]
    NewtonFailure(String),

    #[error("iteration limit exceeded: {0}")]
    MaxIterationsExceeded(String),

    #[error("error covariance out of range: {0}")]
    DeltaOutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model file: {0}")]
    ModelFile(String),
}
