use alloc::string::String;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Two inputs disagree on dimensions or category count.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A NaN or infinity showed up where it must not.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// A training loop exceeded the divergence guard.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! domain {
    ($($arg:tt)*) => { $crate::Error::Domain(alloc::format!($($arg)*)) };
}
macro_rules! shape {
    ($($arg:tt)*) => { $crate::Error::Shape(alloc::format!($($arg)*)) };
}
pub(crate) use {domain, shape};
