//! Amortized free: safe batches are queued on a thread-local freeable list and
//! released a few objects at a time, once per operation, instead of all at
//! once.
//!
//! Gradual release gives the allocator's thread cache a chance to hand freed
//! blocks straight back to the same thread's next allocations, so a large
//! batch never overflows the cache into a burst of remote frees. Objects are
//! never handed back to the application for reuse; each one reaches its
//! deallocation routine exactly once.

use std::collections::VecDeque;
use std::vec;

use crate::retired::RetiredObject;

/// FIFO of batches whose grace period has elapsed.
#[derive(Debug)]
pub struct FreeableList {
    batches: VecDeque<vec::IntoIter<RetiredObject>>,
    len: usize,
    quota: usize,
    high_water: usize,
    lifetime_enqueued: u64,
    lifetime_freed: u64,
}

impl FreeableList {
    pub fn new(quota: usize, high_water: usize) -> Self {
        assert!(quota >= 1, "amortized quota must be at least 1");
        FreeableList {
            batches: VecDeque::new(),
            len: 0,
            quota,
            high_water,
            lifetime_enqueued: 0,
            lifetime_freed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn quota(&self) -> usize {
        self.quota
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }

    pub fn lifetime_enqueued(&self) -> u64 {
        self.lifetime_enqueued
    }

    pub fn lifetime_freed(&self) -> u64 {
        self.lifetime_freed
    }

    /// Appends a batch in order. Constant time: the batch's buffer is queued as is.
    pub fn enqueue_batch(&mut self, batch: Vec<RetiredObject>) {
        if batch.is_empty() {
            return;
        }
        self.len += batch.len();
        self.lifetime_enqueued += batch.len() as u64;
        self.batches.push_back(batch.into_iter());
    }

    /// Hands up to one quota of the oldest objects to `dealloc`, or two
    /// quotas while the list is above its high-water mark.
    pub fn free_some(&mut self, mut dealloc: impl FnMut(RetiredObject)) -> usize {
        let budget = if self.len > self.high_water {
            2 * self.quota
        } else {
            self.quota
        };
        let mut freed = 0;
        while freed < budget {
            let Some(obj) = self.pop_front() else { break };
            dealloc(obj);
            freed += 1;
        }
        freed
    }

    /// Hands every queued object to `dealloc`, oldest first.
    pub fn drain(&mut self, mut dealloc: impl FnMut(RetiredObject)) -> usize {
        let mut freed = 0;
        while let Some(obj) = self.pop_front() {
            dealloc(obj);
            freed += 1;
        }
        freed
    }

    /// Moves every queued object into `sink` without counting them as freed here.
    pub(crate) fn take_all(&mut self, sink: &mut Vec<RetiredObject>) {
        for batch in self.batches.drain(..) {
            sink.extend(batch);
        }
        self.lifetime_enqueued -= self.len as u64;
        self.len = 0;
    }

    fn pop_front(&mut self) -> Option<RetiredObject> {
        loop {
            let front = self.batches.front_mut()?;
            match front.next() {
                Some(obj) => {
                    self.len -= 1;
                    self.lifetime_freed += 1;
                    return Some(obj);
                }
                None => {
                    self.batches.pop_front();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retired::{alloc_block, free_block, DeallocTag};
    use proptest::prelude::*;

    fn objs(ids: std::ops::Range<usize>) -> Vec<RetiredObject> {
        ids.map(|i| {
            let mut o = unsafe { RetiredObject::new(alloc_block(8), 8, DeallocTag::HEAP) };
            o.set_stamp(i as u64);
            o
        })
        .collect()
    }

    fn release(o: RetiredObject) -> u64 {
        let id = o.retire_stamp();
        unsafe { free_block(o.ptr(), o.size_bytes()) };
        id
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut l = FreeableList::new(1, 100);
        l.enqueue_batch(Vec::new());
        assert!(l.is_empty());
        assert_eq!(l.lifetime_enqueued(), 0);
    }

    #[test]
    fn batches_keep_fifo_order() {
        let mut l = FreeableList::new(1, 100);
        l.enqueue_batch(objs(0..2));
        l.enqueue_batch(objs(2..3));
        let mut order = Vec::new();
        l.drain(|o| order.push(release(o)));
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn enqueue_reference_batch_frees_nothing() {
        let mut l = FreeableList::new(1, usize::MAX);
        let mut freed = 0;
        l.enqueue_batch(objs(0..32_768));
        assert_eq!(l.len(), 32_768);
        assert_eq!(l.lifetime_freed(), 0);
        l.drain(|o| {
            release(o);
            freed += 1;
        });
        assert_eq!(freed, 32_768);
    }

    #[test]
    fn free_some_on_empty_returns_zero() {
        let mut l = FreeableList::new(1, 10);
        assert_eq!(l.free_some(|_| unreachable!()), 0);
    }

    #[test]
    fn free_some_takes_the_front() {
        let mut l = FreeableList::new(1, 10);
        l.enqueue_batch(objs(0..3));
        let mut got = Vec::new();
        assert_eq!(l.free_some(|o| got.push(release(o))), 1);
        assert_eq!(got, vec![0]);
        assert_eq!(l.len(), 2);
        l.drain(|o| {
            release(o);
        });
    }

    #[test]
    fn one_per_op_drains_a_thousand() {
        let mut l = FreeableList::new(1, usize::MAX);
        l.enqueue_batch(objs(0..1000));
        let mut per_op = Vec::new();
        for _ in 0..1000 {
            per_op.push(l.free_some(|o| {
                release(o);
            }));
        }
        assert!(per_op.iter().all(|&n| n == 1));
        assert!(l.is_empty());
        assert_eq!(l.lifetime_freed(), 1000);
    }

    #[test]
    fn catch_up_doubles_above_high_water() {
        let mut l = FreeableList::new(3, 10);
        l.enqueue_batch(objs(0..12));
        assert_eq!(l.free_some(|o| { release(o); }), 6);
        assert_eq!(l.len(), 6);
        assert_eq!(l.free_some(|o| { release(o); }), 3);
        l.drain(|o| { release(o); });
    }

    #[test]
    fn drain_is_idempotent() {
        let mut l = FreeableList::new(1, 10);
        l.enqueue_batch(objs(0..7));
        assert_eq!(l.drain(|o| { release(o); }), 7);
        assert_eq!(l.drain(|o| { release(o); }), 0);
        assert_eq!(l.lifetime_freed(), l.lifetime_enqueued());
    }

    proptest! {
        #[test]
        fn fifo_and_bounded_work(sizes in prop::collection::vec(0usize..40, 0..12), quota in 1usize..4, hw in 0usize..60) {
            let mut l = FreeableList::new(quota, hw);
            let mut next = 0;
            for s in &sizes {
                l.enqueue_batch(objs(next..next + s));
                next += s;
            }
            let mut order = Vec::new();
            loop {
                let n = l.free_some(|o| order.push(release(o)));
                prop_assert!(n <= 2 * quota);
                prop_assert!(l.lifetime_freed() <= l.lifetime_enqueued());
                if n == 0 { break; }
            }
            prop_assert_eq!(order, (0..next as u64).collect::<Vec<_>>());
            prop_assert_eq!(l.lifetime_freed(), l.lifetime_enqueued());
        }
    }
}
