use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The model document could not be parsed; `path` is the JSON field path.
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    /// A structural invariant of a model or field is violated.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("simplex violation: {0}")]
    Simplex(String),

    #[error("non-finite entry at ({row}, {col}) of payoff matrix")]
    NonFinite { row: usize, col: usize },

    #[error("linear program did not converge within {iterations} pivots")]
    LpFailure { iterations: usize },

    #[error(
        "step-size guard violated: dt*(lambda*max|c| + 2*max q*) = {measure:.6} > {safety}; \
         use at least {required_steps} steps"
    )]
    Cfl {
        measure: f64,
        safety: f64,
        required_steps: usize,
    },

    #[error("positivity lost at step {step}, state {state}: phi = {value}")]
    Positivity {
        step: usize,
        state: usize,
        value: f64,
    },

    #[error("Picard iteration did not converge in {iterations} sweeps (last residual {residual:e})")]
    PicardDiverged { iterations: usize, residual: f64 },

    #[error("exponent overflow: {what} reached {max_exponent}")]
    Overflow { what: String, max_exponent: f64 },

    #[error("model has no Lyapunov data")]
    MissingLyapunov,

    #[error("negative cost present: {0}")]
    NegativeCost(String),

    #[error("simulation bug guard: intensity {actual} exceeds proposal bound {bound} at t = {time}")]
    ProposalBound { actual: f64, bound: f64, time: f64 },

    #[error("{0}")]
    Unsupported(String),

    #[error("artifact schema mismatch: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by unreadable or malformed input rather than a
    /// failed check; the CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Schema(_)
        )
    }
}
