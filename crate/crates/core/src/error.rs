use thiserror::Error;

/// Every failure the library can report.
///
/// [`GleError::category`] maps variants onto three coarse classes so front
/// ends can choose an exit status without matching on every variant.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GleError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),
    #[error("matrix is not stable (margin {margin:.3e})")]
    NotStable { margin: f64 },
    #[error("singular linear solve: {0}")]
    SingularSolve(String),
    #[error("matrix exponential overflowed")]
    Overflow,
    #[error("eigenvalue iteration did not converge")]
    EigenFailure,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("block invariant violated: {0}")]
    InvalidBlock(String),
    #[error("Gamma is singular")]
    SingularGamma,
    #[error("time-scale ordering violated: {0}")]
    OrderingViolation(String),
    #[error("constraint pair is infeasible: {0}")]
    InfeasibleLmi(String),
    #[error("epsilon {0} outside (0, 1]")]
    EpsilonRange(f64),
    #[error("invalid expression: {0}")]
    Expression(String),
    #[error("state norm exceeded 1e8 at t = {time}")]
    Blowup { time: f64 },
    #[error("step {dt} exceeds epsilon {epsilon} under the explicit policy")]
    StepTooLarge { dt: f64, epsilon: f64 },
    #[error("Wiener dimensions differ: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("nu = g B2 B2* h / 2 is singular at x = {0:?}")]
    SingularNu(Vec<f64>),
    #[error("sigma must be strictly positive (got {0})")]
    NonPositiveSigma(f64),
    #[error("unsupported switch combination: {0}")]
    UnsupportedSwitches(String),
    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),
    #[error("Talbot inversion produced imaginary part {0:.3e}")]
    LaplaceInstability(f64),
    #[error("fit window degenerate: {0}")]
    DegenerateWindow(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Coarse failure class used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Validation,
    Numerical,
}

impl GleError {
    pub fn category(&self) -> ErrorCategory {
        use GleError::*;
        match self {
            InvalidConfig(_) | Expression(_) | Io(_) => ErrorCategory::Config,
            DimensionMismatch(_)
            | NotSymmetric(_)
            | InvalidBlock(_)
            | OrderingViolation(_)
            | EpsilonRange(_)
            | StepTooLarge { .. }
            | ChannelMismatch(..)
            | NonPositiveSigma(_)
            | UnsupportedSwitches(_)
            | HypothesisViolation(_)
            | DegenerateWindow(_) => ErrorCategory::Validation,
            NotStable { .. }
            | SingularSolve(_)
            | Overflow
            | EigenFailure
            | NonFinite(_)
            | SingularGamma
            | InfeasibleLmi(_)
            | Blowup { .. }
            | SingularNu(_)
            | LaplaceInstability(_) => ErrorCategory::Numerical,
        }
    }

    /// Short machine-parsable tag, e.g. `not-stable`.
    pub fn tag(&self) -> &'static str {
        use GleError::*;
        match self {
            DimensionMismatch(_) => "dimension-mismatch",
            NotSymmetric(_) => "not-symmetric",
            NotStable { .. } => "not-stable",
            SingularSolve(_) => "singular-solve",
            Overflow => "overflow",
            EigenFailure => "eigen-failure",
            NonFinite(_) => "non-finite",
            InvalidBlock(_) => "invalid-block",
            SingularGamma => "singular-gamma",
            OrderingViolation(_) => "ordering-violation",
            InfeasibleLmi(_) => "infeasible-lmi",
            EpsilonRange(_) => "epsilon-range",
            Expression(_) => "expression",
            Blowup { .. } => "blowup",
            StepTooLarge { .. } => "step-too-large",
            ChannelMismatch(..) => "channel-mismatch",
            SingularNu(_) => "singular-nu",
            NonPositiveSigma(_) => "non-positive-sigma",
            UnsupportedSwitches(_) => "unsupported-switches",
            HypothesisViolation(_) => "hypothesis-violation",
            LaplaceInstability(_) => "laplace-instability",
            DegenerateWindow(_) => "degenerate-window",
            InvalidConfig(_) => "invalid-config",
            Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, GleError>;
