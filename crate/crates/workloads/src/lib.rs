//! Concurrent ordered sets that allocate and retire fixed-size nodes.
//!
//! Every operation must run between `begin_op` and `end_op` on the calling
//! thread's reclamation handle; the structures only retire nodes, they never
//! free a published node themselves.

use std::ptr::NonNull;

use smr_core::{Recorder, Scheme, ThreadHandle};

mod bst;
mod list;
mod lock;

pub use bst::ExternalBst;
pub use list::LinkedListSet;

/// Node size used when none is configured.
pub const DEFAULT_NODE_SIZE: usize = 240;

/// What a data structure needs from the reclamation layer.
pub trait SmrHandle {
    /// Hands an unlinked node of `size` bytes to the reclaimer.
    ///
    /// # Safety
    ///
    /// `ptr` must come from `smr_core::alloc_block(size)`, be unlinked, and
    /// not be retired twice.
    unsafe fn retire_node(&mut self, ptr: NonNull<u8>, size: usize);

    /// True when traversals should verify node canaries.
    fn checks_canaries(&self) -> bool;

    fn report_canary_hit(&self);
}

impl<S: Scheme, R: Recorder> SmrHandle for ThreadHandle<S, R> {
    unsafe fn retire_node(&mut self, ptr: NonNull<u8>, size: usize) {
        self.retire_block(ptr, size)
            .expect("retire outside an operation");
    }

    fn checks_canaries(&self) -> bool {
        ThreadHandle::checks_canaries(self)
    }

    fn report_canary_hit(&self) {
        ThreadHandle::report_canary_hit(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("node size {requested} is below the minimum of {minimum} bytes")]
pub struct NodeSizeError {
    pub requested: usize,
    pub minimum: usize,
}

/// Ordered set of `u64` keys.
pub trait ConcurrentSet: Send + Sync {
    /// Inserts `key`; returns whether it was already present.
    fn insert<H: SmrHandle>(&self, h: &mut H, key: u64) -> bool;

    /// Removes `key`; returns whether it was present.
    fn delete<H: SmrHandle>(&self, h: &mut H, key: u64) -> bool;

    fn contains<H: SmrHandle>(&self, h: &mut H, key: u64) -> bool;

    /// Keys in ascending order. Only meaningful while no operation runs.
    fn keys_quiescent(&self) -> Vec<u64>;

    fn len_quiescent(&self) -> usize {
        self.keys_quiescent().len()
    }

    /// Bytes allocated per node.
    fn node_size(&self) -> usize;

    /// Largest key the structure accepts.
    fn max_key(&self) -> u64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DsKind {
    Bst,
    List,
}

impl DsKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DsKind::Bst => "bst",
            DsKind::List => "list",
        }
    }
}

impl std::str::FromStr for DsKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bst" => Ok(DsKind::Bst),
            "list" => Ok(DsKind::List),
            other => Err(format!("unknown data structure `{other}`")),
        }
    }
}

/// Checks the header word of a node just reached by a traversal.
#[inline]
pub(crate) fn check_canary<H: SmrHandle>(h: &H, node: NonNull<u8>) {
    // SAFETY: in oracle mode freed nodes stay allocated in quarantine.
    if h.checks_canaries() && unsafe { smr_core::canary::is_dead(node) } {
        h.report_canary_hit();
    }
}
