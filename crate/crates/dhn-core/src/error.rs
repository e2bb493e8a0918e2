use thiserror::Error;

/// Errors produced by network construction, hydraulic analysis, thermal
/// stepping, optimization, and scenario IO.
#[derive(Debug, Error)]
pub enum DhnError {
    #[error("structural error: {0}")]
    Structure(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cycle enumeration exceeded cap of {cap} cycles")]
    CycleOverflow { cap: usize },

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("valve assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("nodal pressures are path-dependent: max loop residual {max_residual:.3e} Pa")]
    PathDependence { max_residual: f64 },

    #[error("degenerate junction {junction}: zero total inflow")]
    DegenerateJunction { junction: String },

    #[error("linear system is singular: {0}")]
    Singular(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("infeasible problem: max constraint violation {max_violation:.3e}")]
    Infeasible { max_violation: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}
