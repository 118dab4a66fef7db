use crate::grid::LineId;
use crate::qp::QpStatus;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("network is disconnected: {0}")]
    Disconnected(String),
    #[error("duplicate line id {0}")]
    DuplicateLine(LineId),
    #[error("unknown line id {0}")]
    UnknownLine(LineId),
    #[error("line {0} is already inactive")]
    LineInactive(LineId),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("model is not asymptotically stable (eigenvalue real part {0:e})")]
    Unstable(f64),
    #[error("discrete model has spectral radius {0} >= 1")]
    SpectralRadius(f64),
    #[error("QP Hessian is not positive semidefinite")]
    NotPsd,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("QP not solved: status {status:?}, primal residual {prim_res:e}, dual residual {dual_res:e}")]
    QpFailed { status: QpStatus, prim_res: f64, dual_res: f64 },
    #[error("no feasible setpoint found (worst constraint violation {0:e})")]
    NoFeasibleSetpoint(f64),
    #[error("brute-force search is limited to 4 nodes, got {0}")]
    TooLarge(usize),
    #[error("parse error in {source_name}: {message}")]
    Parse { source_name: String, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("reports come from different scenarios ({0} vs {1})")]
    ScenarioMismatch(String, String),
    #[error("plant state became non-finite at t = {0} s")]
    PlantDiverged(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable code used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Topology(_) | Error::DuplicateLine(_) => "E_TOPOLOGY",
            Error::Disconnected(_) => "E_DISCONNECTED",
            Error::UnknownLine(_) | Error::LineInactive(_) => "E_LINE",
            Error::InvalidParameter(_) => "E_PARAM",
            Error::Dimension(_) => "E_DIMENSION",
            Error::NotPositiveDefinite { .. } => "E_NOT_PD",
            Error::Unstable(_) => "E_UNSTABLE",
            Error::SpectralRadius(_) => "E_SPECTRAL_RADIUS",
            Error::NotPsd => "E_NOT_PSD",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::QpFailed { status, .. } => match status {
                QpStatus::PrimalInfeasible => "E_QP_INFEASIBLE",
                QpStatus::DualInfeasible => "E_QP_UNBOUNDED",
                _ => "E_QP_MAXITER",
            },
            Error::NoFeasibleSetpoint(_) => "E_SETPOINT_INFEASIBLE",
            Error::TooLarge(_) => "E_TOO_LARGE",
            Error::Parse { .. } => "E_PARSE",
            Error::Config(_) => "E_CONFIG",
            Error::ScenarioMismatch(..) => "E_SCENARIO_MISMATCH",
            Error::PlantDiverged(_) => "E_PLANT_DIVERGED",
            Error::Io(_) => "E_IO",
            Error::Csv(_) => "E_CSV",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
