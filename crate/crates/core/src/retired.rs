//! Retired objects and the routines that eventually deallocate them.

use std::alloc::{self, Layout};
use std::fmt;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use crate::error::{Result, SmrError};

/// Alignment of every block handed out by [`alloc_block`].
pub const HEAP_ALIGN: usize = 8;

/// Maximum number of deallocation routines a domain can register.
pub const MAX_ROUTINES: usize = 16;

/// Allocates `size` bytes with [`HEAP_ALIGN`] alignment from the global allocator.
///
/// Blocks from here are released by the built-in [`DeallocTag::HEAP`] routine.
pub fn alloc_block(size: usize) -> NonNull<u8> {
    let layout = block_layout(size);
    // SAFETY: `block_layout` never produces a zero-sized layout.
    let ptr = unsafe { alloc::alloc(layout) };
    match NonNull::new(ptr) {
        Some(p) => p,
        None => alloc::handle_alloc_error(layout),
    }
}

/// Returns a block obtained from [`alloc_block`] to the global allocator.
///
/// # Safety
///
/// `ptr` must come from `alloc_block(size)` and must not be used afterwards.
pub unsafe fn free_block(ptr: NonNull<u8>, size: usize) {
    alloc::dealloc(ptr.as_ptr(), block_layout(size));
}

fn block_layout(size: usize) -> Layout {
    Layout::from_size_align(size.max(1), HEAP_ALIGN).expect("block size overflows a layout")
}

/// Selects the routine that deallocates a retired object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DeallocTag(u16);

impl DeallocTag {
    /// Built-in routine: [`free_block`].
    pub const HEAP: DeallocTag = DeallocTag(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// An unlinked node awaiting safe deallocation.
pub struct RetiredObject {
    ptr: NonNull<u8>,
    size: usize,
    stamp: u64,
    tag: DeallocTag,
    /// Operation-state snapshot taken at retire time; only populated in oracle mode.
    pub(crate) snapshot: Option<Box<[u64]>>,
}

// SAFETY: a retired object is unreachable from shared structures, so moving
// the reference to another thread cannot race with the data structure.
unsafe impl Send for RetiredObject {}

impl RetiredObject {
    /// Wraps an unlinked node.
    ///
    /// # Safety
    ///
    /// `ptr` must already be unlinked from every shared structure, must not be
    /// retired twice, and `tag` must name a routine able to release a block of
    /// `size` bytes at `ptr`.
    pub unsafe fn new(ptr: NonNull<u8>, size: usize, tag: DeallocTag) -> Self {
        debug_assert!(size > 0, "retired objects have a positive size");
        RetiredObject {
            ptr,
            size,
            stamp: 0,
            tag,
            snapshot: None,
        }
    }

    pub fn ptr(&self) -> NonNull<u8> {
        self.ptr
    }

    pub fn size_bytes(&self) -> usize {
        self.size
    }

    /// Logical time of the retire, in the owning scheme's clock.
    pub fn retire_stamp(&self) -> u64 {
        self.stamp
    }

    pub fn dealloc_tag(&self) -> DeallocTag {
        self.tag
    }

    pub(crate) fn set_stamp(&mut self, stamp: u64) {
        self.stamp = stamp;
    }

    pub fn snapshot(&self) -> Option<&[u64]> {
        self.snapshot.as_deref()
    }
}

impl fmt::Debug for RetiredObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RetiredObject")
            .field("ptr", &self.ptr)
            .field("size", &self.size)
            .field("stamp", &self.stamp)
            .field("tag", &self.tag)
            .finish()
    }
}

pub type DeallocFn = Box<dyn Fn(NonNull<u8>, usize) + Send + Sync>;

/// Append-only table of deallocation routines, indexed by [`DeallocTag`].
pub(crate) struct DeallocTable {
    routines: [OnceLock<DeallocFn>; MAX_ROUTINES],
    next: AtomicUsize,
}

impl DeallocTable {
    pub(crate) fn new() -> Self {
        let table = DeallocTable {
            routines: std::array::from_fn(|_| OnceLock::new()),
            next: AtomicUsize::new(1),
        };
        let heap: DeallocFn = Box::new(|ptr, size| unsafe { free_block(ptr, size) });
        let _ = table.routines[0].set(heap);
        table
    }

    pub(crate) fn register(&self, routine: DeallocFn) -> Result<DeallocTag> {
        let idx = self.next.fetch_add(1, Ordering::Relaxed);
        if idx >= MAX_ROUTINES {
            return Err(SmrError::TooManyRoutines);
        }
        let _ = self.routines[idx].set(routine);
        Ok(DeallocTag(idx as u16))
    }

    /// Runs the routine selected by `obj`'s tag.
    ///
    /// # Safety
    ///
    /// The object's grace period must have elapsed.
    pub(crate) unsafe fn release(&self, obj: &RetiredObject) {
        let routine = self.routines[obj.tag.index()]
            .get()
            .expect("retired object carries an unregistered deallocation tag");
        routine(obj.ptr, obj.size);
    }
}

/// Use-after-free detection words written at offset 0 of retired objects.
pub mod canary {
    use std::ptr::NonNull;
    use std::sync::atomic::{AtomicU64, Ordering};

    /// Header word of a live node.
    pub const ALIVE: u64 = 0xA11C_E5ED_A11C_E5ED;
    /// Header word of a node the oracle has quarantined.
    pub const POISON: u64 = 0xDEAD_BEEF_DEAD_BEEF;
    const FILL: u8 = 0xDB;

    /// Overwrites a quarantined object with the poison pattern.
    ///
    /// # Safety
    ///
    /// `ptr` must point to `size` writable bytes aligned to 8 that no correct
    /// thread can still reach.
    pub unsafe fn poison(ptr: NonNull<u8>, size: usize) {
        if size >= 8 {
            (*ptr.as_ptr().cast::<AtomicU64>()).store(POISON, Ordering::Release);
            std::ptr::write_bytes(ptr.as_ptr().add(8), FILL, size - 8);
        } else {
            std::ptr::write_bytes(ptr.as_ptr(), FILL, size);
        }
    }

    /// True if the header word at `ptr` no longer reads [`ALIVE`].
    ///
    /// # Safety
    ///
    /// `ptr` must point to an 8-byte aligned header that is still allocated
    /// (quarantine keeps poisoned memory allocated).
    pub unsafe fn is_dead(ptr: NonNull<u8>) -> bool {
        (*ptr.as_ptr().cast::<AtomicU64>()).load(Ordering::Acquire) != ALIVE
    }
}
