use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("transition matrix is not row-stochastic: {0}")]
    NonStochasticMatrix(String),
    #[error("transition matrix is reducible or periodic: {0}")]
    ReducibleChain(String),
    #[error("time must be finite and non-negative, got {0}")]
    NonFiniteTime(f64),
    #[error("driver states are not centered under the stationary law")]
    NotCentered,
    #[error("Poisson system is singular on the centered subspace (reciprocal condition {0:.3e})")]
    SingularBeyondKernel(f64),
    #[error("driver has no spectral gap (decay rate {0})")]
    NoSpectralGap(f64),
    #[error("covariance kernel is indefinite: most negative eigenvalue {min:.3e}, largest {max:.3e}")]
    IndefiniteKernel { min: f64, max: f64 },
    #[error("grid mismatch: expected {expected} points, got {got}")]
    GridMismatch { expected: usize, got: usize },
    #[error("consistency check failed: {0}")]
    ConsistencyFailure(String),
    #[error("time step [{start}, {end}] straddles a driver jump at {jump}")]
    JumpStraddled { start: f64, end: f64, jump: f64 },
    #[error("x-shift of {cells:.1} cells per half step exceeds the periodic limit")]
    CflViolation { cells: f64 },
    #[error("resolution insufficient: {0}")]
    ResolutionInsufficient(String),
    #[error("Picard iteration did not converge after {iters} iterations (last difference {last:.3e})")]
    NoConvergence { iters: usize, last: f64 },
    #[error("ensemble too small: standard error {se:.3e} exceeds requested resolution {resolution:.3e}")]
    InsufficientEnsemble { se: f64, resolution: f64 },
    #[error("time step {dt:.3e} exceeds the stability bound {bound:.3e}")]
    StabilityViolation { dt: f64, bound: f64 },
    #[error("state became non-finite at t = {0}")]
    NonFiniteState(f64),
    #[error("observable mismatch: {0}")]
    ObservableMismatch(String),
    #[error("run {run} (substream {stream}) failed: {source}")]
    RunFailed {
        run: usize,
        stream: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
