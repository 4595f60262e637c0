use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("embedding not PSD: smallest eigenvalue {min:e} against largest {max:e}")]
    EmbeddingNotPsd { min: f64, max: f64 },

    #[error("kernel not PSD on grid: {0}")]
    NotPsd(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("CFL violation: dt = {dt:e} exceeds h^2/2 = {limit:e} for the explicit scheme")]
    Cfl { dt: f64, limit: f64 },

    #[error("non-finite value produced at time step {step}")]
    NonFinite { step: usize },

    #[error("noise provenance mismatch: {0}")]
    Provenance(String),

    #[error(
        "particle degeneracy at level {level:e}: all scores tied; increase pcn_beta or particles"
    )]
    Degenerate { level: f64 },

    #[error("t_n = exp(-n^(1+alpha)) underflows for n = {n}, alpha = {alpha}; use a smaller n")]
    Underflow { n: usize, alpha: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("gamma = {gamma} must lie in (0, {max}) so that the min-grid exponent is negative")]
    GammaOutOfRange { gamma: f64, max: f64 },

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("cover violation between centers {j} and {next}: d = {distance:e} > {bound:e}")]
    CoverViolation {
        j: usize,
        next: usize,
        distance: f64,
        bound: f64,
    },

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

/// Attach context to module errors as they cross into the runner.
pub trait ResultExt<T> {
    fn context(self, context: impl Into<String>) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|e| Error::Context {
            context: context.into(),
            source: Box::new(e),
        })
    }
}

pub(crate) fn ensure_time(name: &str, t: f64) -> Result<()> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "{name} must be a finite time >= 0, got {t}"
        )))
    }
}
