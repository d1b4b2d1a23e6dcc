use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("packet too narrow: sigma {sigma} < 3 dx ({dx})")]
    PacketTooNarrow { sigma: f64, dx: f64 },
    #[error("packet outside grid: [{lo}, {hi}] not inside [{x_min}, {x_max}]")]
    PacketOutsideGrid { lo: f64, hi: f64, x_min: f64, x_max: f64 },
    #[error("non-finite amplitude at index {0}")]
    NonFinite(usize),
    #[error("boundary leak: |amp| = {amp:e} in the outer 5% of the grid (limit 1e-8)")]
    BoundaryLeak { amp: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("aliasing detected: {0}")]
    AliasingDetected(String),
    #[error("norm drift {drift:e} in one step exceeds {limit:e}")]
    NormDrift { drift: f64, limit: f64 },
    #[error("sample density too low: rho * ell_d = {0} < 4")]
    DensityTooLow(f64),
    #[error("too many time slices for the Monte Carlo path sum: {0} > 3")]
    TooManySlices(usize),
    #[error("Monte Carlo estimate inconclusive: stderr exceeds the estimate at every grid point")]
    StderrDominates,
    #[error("time {total} is not an integer number of steps of {dt}")]
    StepMismatch { total: f64, dt: f64 },
    #[error("tridiagonal solve residual {0:e} above tolerance")]
    SolverDivergence(f64),
    #[error("unsupported oracle case: {0}")]
    UnsupportedCase(String),
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonNoConvergence { iterations: usize, residual: f64 },
    #[error("caustic detected: action Hessian is singular (pivot {0:e})")]
    CausticDetected(f64),
    #[error("too many micro-coordinates: {0} > 3")]
    DimensionTooLarge(usize),
    #[error("branch {branch} leaves the grid at t = {t}")]
    BranchLeftGrid { branch: usize, t: f64 },
    #[error("pointer packet unresolved: {0}")]
    UnresolvedPacket(String),
    #[error("branches not separated: separation {separation} <= {threshold}")]
    BranchesNotSeparated { separation: f64, threshold: f64 },
    #[error("branches never separate within the time budget {0}")]
    NeverSeparates(f64),
    #[error("trajectory entered a node of the wave function at Q = {q}")]
    NodeEncountered { q: f64 },
    #[error("insufficient frames: {0}")]
    InsufficientFrames(String),
    #[error("basin boundary unresolved: basin width {width} below dx {dx}")]
    BasinBoundaryUnresolved { width: f64, dx: f64 },
    #[error("config invalid: {0}")]
    ConfigInvalid(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
