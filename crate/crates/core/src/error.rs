use alloc::string::String;

/// Errors raised by the detector core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// An input has the wrong shape or dimension.
    #[error("input error: {0}")]
    Input(String),
    /// An operation was called in the wrong state, e.g. backward without forward.
    #[error("state error: {0}")]
    State(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch} (last finite loss {last_finite_loss})")]
    Diverged { epoch: usize, last_finite_loss: f64 },
    /// A metric is undefined for the given labels (e.g. a single class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    /// A requested operating point cannot be reached.
    #[error("impossible target: {0}")]
    Impossible(String),
    /// A binary file failed to parse or verify.
    #[error("corrupt data at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    /// An atlas was built by a different model than the one scoring against it.
    #[error("model fingerprint mismatch")]
    FingerprintMismatch,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(alloc::format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use input_err;
