use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("dose vector has {got} components, curve expects {expected}")]
    DoseArity { expected: usize, got: usize },
    #[error("negative dose {0} Gy")]
    NegativeDose(f64),
    #[error("parameter index {index} out of range (curve has {len} addressable parameters)")]
    ParamIndex { index: usize, len: usize },
    #[error("invalid data point {index}: {reason}")]
    InvalidData { index: usize, reason: String },
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
    #[error("degenerate design: determinant W0 = {0:e}")]
    DegenerateDesign(f64),
    #[error("Hessian of the log-posterior is singular or not negative definite (condition estimate {condition:e})")]
    SingularHessian { condition: f64 },
    #[error("non-positive curvature omega = {omega:e} for parameter {param}")]
    InvalidCurvature { param: usize, omega: f64 },
    #[error("fit did not converge; uncertainties need a converged result")]
    NotConverged,
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("theta = {0} outside the open interval (0, 1)")]
    ThetaOutOfRange(f64),
    #[error("observed frequency {y_f} is below the background {y0}")]
    BelowBackground { y_f: f64, y0: f64 },
    #[error("theta = {0} is too close to a boundary for a two-sided derivative")]
    BoundaryTheta(f64),
    #[error("no feasible dose on the requested grid")]
    InfeasibleGrid,
    #[error("posterior peak lies on the grid boundary")]
    PeakAtBoundary,
    #[error("posterior has non-negative log-curvature at its peak")]
    FlatPosterior,
    #[error("every Monte Carlo sample was infeasible")]
    AllSamplesInfeasible,
    #[error("target frequency is unreachable: {0}")]
    Unreachable(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("CSV row {row}, column `{column}`: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },
    #[error("CSV schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics (singular systems, non-convergence)
    /// rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient(_)
                | Error::DegenerateDesign(_)
                | Error::SingularHessian { .. }
                | Error::InvalidCurvature { .. }
                | Error::NotConverged
                | Error::PeakAtBoundary
                | Error::FlatPosterior
                | Error::AllSamplesInfeasible
                | Error::Unreachable(_)
                | Error::InfeasibleGrid
        )
    }
}
