use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    Dimension {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("time {t} outside schedule range [{t_min}, {t_max}]")]
    Schedule { t: f64, t_min: f64, t_max: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
