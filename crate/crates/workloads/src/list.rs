//! Sorted lock-free linked list (Harris-style logical deletion with
//! Michael's unlinking search). The low bit of `next` marks its owner as
//! deleted; whichever thread's CAS unlinks a node retires it.

use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use smr_core::{alloc_block, canary, free_block};

use crate::{check_canary, ConcurrentSet, NodeSizeError, SmrHandle};

const MARK: usize = 1;

#[repr(C)]
struct Node {
    canary: AtomicU64,
    key: u64,
    next: AtomicUsize,
}

#[inline]
fn node(word: usize) -> *mut Node {
    (word & !MARK) as *mut Node
}

pub struct LinkedListSet {
    head: AtomicUsize,
    node_size: usize,
}

// SAFETY: links are atomics; reclamation goes through the caller's handle.
unsafe impl Send for LinkedListSet {}
unsafe impl Sync for LinkedListSet {}

impl LinkedListSet {
    pub fn min_node_size() -> usize {
        std::mem::size_of::<Node>()
    }

    pub fn new(node_size: usize) -> Result<Self, NodeSizeError> {
        if node_size < Self::min_node_size() {
            return Err(NodeSizeError {
                requested: node_size,
                minimum: Self::min_node_size(),
            });
        }
        Ok(LinkedListSet {
            head: AtomicUsize::new(0),
            node_size,
        })
    }

    /// Finds the first unmarked node with key >= `key`, unlinking marked
    /// nodes on the way. Returns the link that points at it.
    fn find<H: SmrHandle>(&self, h: &mut H, key: u64) -> (&AtomicUsize, *mut Node) {
        // SAFETY: nodes reachable during the caller's operation stay allocated.
        unsafe {
            'retry: loop {
                let mut prev = &self.head;
                let mut cur = prev.load(Ordering::Acquire);
                loop {
                    let c = node(cur);
                    if c.is_null() {
                        return (prev, c);
                    }
                    check_canary(h, NonNull::new_unchecked(c).cast());
                    let next = (*c).next.load(Ordering::Acquire);
                    if next & MARK != 0 {
                        if prev
                            .compare_exchange(cur, next & !MARK, Ordering::AcqRel, Ordering::Acquire)
                            .is_err()
                        {
                            continue 'retry;
                        }
                        h.retire_node(NonNull::new_unchecked(c).cast(), self.node_size);
                        cur = next & !MARK;
                        continue;
                    }
                    if (*c).key >= key {
                        return (prev, c);
                    }
                    prev = &(*c).next;
                    cur = next;
                }
            }
        }
    }
}

impl ConcurrentSet for LinkedListSet {
    fn insert<H: SmrHandle>(&self, h: &mut H, key: u64) -> bool {
        let mut fresh: *mut Node = ptr::null_mut();
        loop {
            let (prev, cur) = self.find(h, key);
            // SAFETY: see `find`; `fresh` is unpublished until the CAS succeeds.
            unsafe {
                if !cur.is_null() && (*cur).key == key {
                    if !fresh.is_null() {
                        free_block(NonNull::new_unchecked(fresh).cast(), self.node_size);
                    }
                    return true;
                }
                if fresh.is_null() {
                    fresh = alloc_block(self.node_size).cast::<Node>().as_ptr();
                    fresh.write(Node {
                        canary: AtomicU64::new(canary::ALIVE),
                        key,
                        next: AtomicUsize::new(0),
                    });
                }
                (*fresh).next.store(cur as usize, Ordering::Relaxed);
                if prev
                    .compare_exchange(cur as usize, fresh as usize, Ordering::AcqRel, Ordering::Acquire)
                    .is_ok()
                {
                    return false;
                }
            }
        }
    }

    fn delete<H: SmrHandle>(&self, h: &mut H, key: u64) -> bool {
        loop {
            let (prev, cur) = self.find(h, key);
            // SAFETY: see `find`.
            unsafe {
                if cur.is_null() || (*cur).key != key {
                    return false;
                }
                let next = (*cur).next.load(Ordering::Acquire);
                if next & MARK != 0 {
                    continue;
                }
                if (*cur)
                    .next
                    .compare_exchange(next, next | MARK, Ordering::AcqRel, Ordering::Acquire)
                    .is_err()
                {
                    continue;
                }
                if prev
                    .compare_exchange(cur as usize, next, Ordering::AcqRel, Ordering::Acquire)
                    .is_ok()
                {
                    h.retire_node(NonNull::new_unchecked(cur).cast(), self.node_size);
                } else {
                    self.find(h, key);
                }
                return true;
            }
        }
    }

    fn contains<H: SmrHandle>(&self, h: &mut H, key: u64) -> bool {
        let mut cur = node(self.head.load(Ordering::Acquire));
        // SAFETY: see `find`.
        unsafe {
            while !cur.is_null() {
                check_canary(h, NonNull::new_unchecked(cur).cast());
                if (*cur).key >= key {
                    return (*cur).key == key && (*cur).next.load(Ordering::Acquire) & MARK == 0;
                }
                cur = node((*cur).next.load(Ordering::Acquire));
            }
        }
        false
    }

    fn keys_quiescent(&self) -> Vec<u64> {
        let mut keys = Vec::new();
        let mut cur = node(self.head.load(Ordering::Acquire));
        // SAFETY: no concurrent operations.
        unsafe {
            while !cur.is_null() {
                let next = (*cur).next.load(Ordering::Relaxed);
                if next & MARK == 0 {
                    keys.push((*cur).key);
                }
                cur = node(next);
            }
        }
        keys
    }

    fn node_size(&self) -> usize {
        self.node_size
    }

    fn max_key(&self) -> u64 {
        u64::MAX
    }
}

impl Drop for LinkedListSet {
    fn drop(&mut self) {
        let mut cur = node(*self.head.get_mut());
        // SAFETY: exclusive access; unlinked nodes were retired, the rest are ours.
        unsafe {
            while !cur.is_null() {
                let next = node((*cur).next.load(Ordering::Relaxed));
                free_block(NonNull::new_unchecked(cur).cast(), self.node_size);
                cur = next;
            }
        }
    }
}
