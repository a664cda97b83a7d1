use thiserror::Error;

/// Errors raised by model construction, inference and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("unsupported kernel combination: {0}")]
    UnsupportedKernel(String),

    #[error("cubature budget exceeded: {order}^{dim} = {points} points (budget {budget})")]
    CubatureBudget {
        order: usize,
        dim: usize,
        points: f64,
        budget: usize,
    },

    #[error("Cholesky factorisation failed after jitter escalation (dim {dim})")]
    Cholesky { dim: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular innovation covariance at step {step}")]
    SingularInnovation { step: usize },

    #[error("singular predictive covariance in smoother at step {step}")]
    SingularSmoother { step: usize },

    #[error("non-finite energy at step {step}")]
    NonFiniteEnergy { step: usize },

    #[error("non-finite hyperparameter gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed CSV at line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("empty posterior: nothing to plot")]
    EmptyPosterior,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap with pass/step (or fold) context, keeping the original as the source.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
