//! External binary search tree with per-node ticket locks and lock-free
//! searches. Keys live in leaves; internal nodes only route (smaller keys go
//! left). Insert replaces a leaf by a new internal node with two leaf
//! children; delete splices the leaf's parent out and retires both.

use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, Ordering};

use smr_core::{alloc_block, canary, free_block};

use crate::lock::TicketLock;
use crate::{check_canary, ConcurrentSet, NodeSizeError, SmrHandle};

const INF1: u64 = u64::MAX - 1;
const INF2: u64 = u64::MAX;

#[repr(C)]
struct Node {
    canary: AtomicU64,
    key: u64,
    left: AtomicPtr<Node>,
    right: AtomicPtr<Node>,
    lock: TicketLock,
    removed: AtomicBool,
    leaf: bool,
}

impl Node {
    #[inline]
    fn child(&self, key: u64) -> &AtomicPtr<Node> {
        if key < self.key {
            &self.left
        } else {
            &self.right
        }
    }
}

pub struct ExternalBst {
    root: NonNull<Node>,
    node_size: usize,
}

// SAFETY: nodes are shared through atomics and locks; reclamation is
// delegated to the caller's handle.
unsafe impl Send for ExternalBst {}
unsafe impl Sync for ExternalBst {}

impl ExternalBst {
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
        let mut t = ExternalBst {
            root: NonNull::dangling(),
            node_size,
        };
        let left = t.alloc(INF1, true, ptr::null_mut(), ptr::null_mut());
        let right = t.alloc(INF2, true, ptr::null_mut(), ptr::null_mut());
        let root = t.alloc(INF2, false, left, right);
        t.root = NonNull::new(root).unwrap();
        Ok(t)
    }

    fn alloc(&self, key: u64, leaf: bool, left: *mut Node, right: *mut Node) -> *mut Node {
        let p = alloc_block(self.node_size).cast::<Node>().as_ptr();
        // SAFETY: fresh block of at least size_of::<Node>() bytes, aligned to 8.
        unsafe {
            p.write(Node {
                canary: AtomicU64::new(canary::ALIVE),
                key,
                left: AtomicPtr::new(left),
                right: AtomicPtr::new(right),
                lock: TicketLock::default(),
                removed: AtomicBool::new(false),
                leaf,
            });
        }
        p
    }

    /// Returns (grandparent, parent, leaf) on the search path for `key`.
    #[inline]
    fn search<H: SmrHandle>(&self, h: &H, key: u64) -> (*mut Node, *mut Node, *mut Node) {
        let mut gp = ptr::null_mut();
        let mut p = self.root.as_ptr();
        // SAFETY: the caller is inside an operation, so every node reached
        // from the root stays allocated until it ends.
        unsafe {
            let mut l = (*p).child(key).load(Ordering::Acquire);
            check_canary(h, NonNull::new_unchecked(l).cast());
            while !(*l).leaf {
                gp = p;
                p = l;
                l = (*l).child(key).load(Ordering::Acquire);
                check_canary(h, NonNull::new_unchecked(l).cast());
            }
            (gp, p, l)
        }
    }
}

impl ConcurrentSet for ExternalBst {
    fn insert<H: SmrHandle>(&self, h: &mut H, key: u64) -> bool {
        assert!(key <= self.max_key(), "key {key} out of range");
        loop {
            let (_, p, l) = self.search(h, key);
            // SAFETY: see `search`.
            unsafe {
                let lkey = (*l).key;
                if lkey == key {
                    return true;
                }
                let parent = &*p;
                parent.lock.lock();
                let slot = parent.child(key);
                if parent.removed.load(Ordering::Acquire) || slot.load(Ordering::Acquire) != l {
                    parent.lock.unlock();
                    continue;
                }
                let fresh = self.alloc(key, true, ptr::null_mut(), ptr::null_mut());
                let (lo, hi) = if key < lkey { (fresh, l) } else { (l, fresh) };
                let router = self.alloc(key.max(lkey), false, lo, hi);
                slot.store(router, Ordering::Release);
                parent.lock.unlock();
                return false;
            }
        }
    }

    fn delete<H: SmrHandle>(&self, h: &mut H, key: u64) -> bool {
        loop {
            let (gp, p, l) = self.search(h, key);
            // SAFETY: see `search`. User leaves sit at depth >= 2, so `gp` is set.
            unsafe {
                if (*l).key != key {
                    return false;
                }
                let (grand, parent) = (&*gp, &*p);
                grand.lock.lock();
                parent.lock.lock();
                let gslot = grand.child(key);
                let pslot = parent.child(key);
                let valid = !grand.removed.load(Ordering::Acquire)
                    && gslot.load(Ordering::Acquire) == p
                    && !parent.removed.load(Ordering::Acquire)
                    && pslot.load(Ordering::Acquire) == l;
                if !valid {
                    parent.lock.unlock();
                    grand.lock.unlock();
                    continue;
                }
                let sibling = if ptr::eq(pslot, &parent.left) {
                    parent.right.load(Ordering::Acquire)
                } else {
                    parent.left.load(Ordering::Acquire)
                };
                parent.removed.store(true, Ordering::Release);
                gslot.store(sibling, Ordering::Release);
                parent.lock.unlock();
                grand.lock.unlock();
                h.retire_node(NonNull::new_unchecked(p).cast(), self.node_size);
                h.retire_node(NonNull::new_unchecked(l).cast(), self.node_size);
                return true;
            }
        }
    }

    fn contains<H: SmrHandle>(&self, h: &mut H, key: u64) -> bool {
        let (_, _, l) = self.search(h, key);
        // SAFETY: see `search`.
        unsafe { (*l).key == key }
    }

    fn keys_quiescent(&self) -> Vec<u64> {
        let mut keys = Vec::new();
        let mut stack = vec![self.root.as_ptr()];
        // SAFETY: no concurrent operations, so the tree is stable.
        unsafe {
            while let Some(n) = stack.pop() {
                if (*n).leaf {
                    if (*n).key < INF1 {
                        keys.push((*n).key);
                    }
                } else {
                    stack.push((*n).right.load(Ordering::Relaxed));
                    stack.push((*n).left.load(Ordering::Relaxed));
                }
            }
        }
        keys
    }

    fn node_size(&self) -> usize {
        self.node_size
    }

    fn max_key(&self) -> u64 {
        INF1 - 1
    }
}

impl Drop for ExternalBst {
    fn drop(&mut self) {
        let mut stack = vec![self.root.as_ptr()];
        // SAFETY: exclusive access; retired nodes are no longer reachable.
        unsafe {
            while let Some(n) = stack.pop() {
                if !(*n).leaf {
                    stack.push((*n).left.load(Ordering::Relaxed));
                    stack.push((*n).right.load(Ordering::Relaxed));
                }
                free_block(NonNull::new_unchecked(n).cast(), self.node_size);
            }
        }
    }
}
