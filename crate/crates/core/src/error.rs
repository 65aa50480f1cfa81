use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("singular model: {0}")]
    SingularModel(String),
    #[error("degenerate reference heading {0} rad (cos = 0)")]
    DegenerateReference(f64),
    #[error("integration blew up at t = {time}")]
    IntegrationBlowup { time: f64 },
    #[error("ill-conditioned system: {0}")]
    Conditioning(String),
    #[error("degenerate normalization: oracle policy range is zero")]
    DegenerateNormalization,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
