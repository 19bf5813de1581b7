use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A data row could not be parsed or failed validation.
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },

    /// One treatment arm (or a stratum of it) is empty.
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A conditional-CDF model could not be fitted.
    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("fold {fold}: {source}")]
    FoldFit {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "critical value search did not converge after {iterations} iterations \
         (c_L = {c_lower}, c_U = {c_upper}, constraint residuals {residual_lower:.3e}, {residual_upper:.3e})"
    )]
    NoConvergence {
        iterations: usize,
        c_lower: f64,
        c_upper: f64,
        residual_lower: f64,
        residual_upper: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateDesign(msg.into())
    }

    /// True for errors caused by the input data or configuration rather than
    /// by the estimation itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::DegenerateDesign(_) | Error::Config(_)
        )
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
