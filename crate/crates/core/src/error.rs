use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("signal file {0} has an odd byte count")]
    OddByteCount(PathBuf),

    #[error("signal is empty")]
    EmptySignal,

    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("negative magnitude {value} at bin {bin}, frame {frame}")]
    NegativeMagnitude { bin: usize, frame: usize, value: f64 },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("non-finite attack loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("attack gradient is zero; no descent direction")]
    ZeroGradient,

    #[error("model file: {0}")]
    ModelFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from user input (configuration, missing or
    /// malformed files) rather than a failure during computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::OddByteCount(_)
                | Error::EmptySignal
                | Error::Config(_)
                | Error::Parse(_)
                | Error::Label(_)
                | Error::ModelFormat(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
