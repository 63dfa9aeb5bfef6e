use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("moment degree {degree} exceeds supported maximum {max}")]
    DegreeOutOfRange { degree: usize, max: usize },

    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear system is near-singular: nodes {first} and {second} are {gap:e} apart")]
    NearSingular {
        first: usize,
        second: usize,
        gap: f64,
    },

    #[error("linear system is ill-conditioned (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("region has zero Gaussian mass")]
    ZeroMass,

    #[error("declared mass {declared} does not match measured mass {measured}")]
    MassMismatch { declared: f64, measured: f64 },

    #[error("explicit construction budget exceeded (step {step:e}, {pieces} pieces, worst residual {residual:e})")]
    BudgetExceeded {
        step: f64,
        pieces: usize,
        residual: f64,
    },

    #[error("reduction exceeded {max_events} events")]
    TooManyEvents { max_events: usize },

    #[error("Newton projection did not converge (residual {residual:e})")]
    NewtonDiverged { residual: f64 },

    #[error("flow left the moment manifold (residual {residual:e} after {steps} steps)")]
    FlowDrift { residual: f64, steps: usize },

    #[error("breakpoint flow stalled after {steps} steps without an event")]
    Stalled { steps: usize },

    #[error(
        "input moments are {residual:e} from the target, beyond the entry tolerance {tolerance:e}"
    )]
    EntryResidual { residual: f64, tolerance: f64 },

    #[error("soft indicator leaves [0,1] at x = {x}: value {value}")]
    RangeViolation { x: f64, value: f64 },

    #[error("correction coefficients too large: sum |a_i| = {sum:e} exceeds {limit:e}")]
    CoefficientBlowup { sum: f64, limit: f64 },

    #[error("clipping activates inside |x| <= {radius}: clip points {lo}, {hi}")]
    ClipRegime { radius: f64, lo: f64, hi: f64 },

    #[error("randomized rounding failed after {attempts} attempts (best residual {best:e})")]
    RetriesExhausted { attempts: usize, best: f64 },

    #[error("certificate failed: {0}")]
    Certificate(String),

    #[error("parameter regime violation: {0}")]
    Regime(String),

    #[error("rectangles {0} and {1} overlap")]
    Overlap(usize, usize),

    #[error("sampler acceptance rate {rate} below {min}")]
    Acceptance { rate: f64, min: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
