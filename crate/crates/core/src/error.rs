use thiserror::Error;

/// Errors reported by the reclamation API.
///
/// Every variant is a caller-contract violation except [`SmrError::RingFull`]
/// and [`SmrError::TooManyRoutines`], which are capacity limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SmrError {
    #[error("already registered")]
    AlreadyRegistered,
    #[error("ring full")]
    RingFull,
    #[error("operation already open")]
    OperationOpen,
    #[error("not in operation")]
    NotInOperation,
    #[error("no open operation")]
    NoOpenOperation,
    #[error("threads active")]
    ThreadsActive,
    #[error("token not held")]
    TokenNotHeld,
    #[error("deallocation routine table full")]
    TooManyRoutines,
}

pub type Result<T, E = SmrError> = std::result::Result<T, E>;
