//! Safe memory reclamation for concurrent data structures.
//!
//! A [`Domain`] couples one reclamation [`Scheme`] with its registered
//! threads. Threads bracket every data-structure operation with
//! [`ThreadHandle::begin_op`] / [`ThreadHandle::end_op`] and hand unlinked
//! nodes to [`ThreadHandle::retire`]. Once a node's grace period has elapsed
//! it is released according to the domain's [`FreePolicy`]: all at once, or
//! gradually through a thread-local [`FreeableList`].
//!
//! Schemes: [`Leaky`] (never frees), [`Ebr`] (announcement-array epochs),
//! [`Qsbr`] (quiescent states) and [`TokenRing`] (a circulating token).

pub mod amortized;
pub mod config;
mod domain;
pub mod ebr;
pub mod error;
mod free_path;
pub mod leaky;
pub mod oracle;
pub mod qsbr;
pub mod retired;
pub mod scheme;
pub mod timeline;
pub mod token;

pub use amortized::FreeableList;
pub use config::{DomainConfig, FreePolicy, DEBUG_ORACLE_ENV, REFERENCE_BATCH};
pub use domain::{Domain, DomainStats, ThreadHandle};
pub use ebr::{Ebr, EbrParams};
pub use error::{Result, SmrError};
pub use free_path::{FreeCtx, GarbageSample};
pub use leaky::Leaky;
pub use oracle::{GracePeriodOracle, OracleReport, Verdict};
pub use qsbr::Qsbr;
pub use retired::{alloc_block, canary, free_block, DeallocFn, DeallocTag, RetiredObject};
pub use scheme::Scheme;
pub use timeline::{EventBuffer, EventKind, NullRecorder, OverflowPolicy, Recorder, TimelineEvent};
pub use token::{TokenAudit, TokenParams, TokenRing, TokenVariant};
