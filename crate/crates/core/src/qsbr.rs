//! Quiescent-state-based reclamation.
//!
//! Each `end_op` is a quiescent point: the thread copies the global counter
//! into its mark. When every online thread's mark has reached the counter,
//! the counter moves on. An object retired while the counter read `c` is safe
//! once the counter reaches `c + 2`: every mark was refreshed at a quiescent
//! point after the counter passed `c + 1`, which is after the retire.

use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_utils::CachePadded;

use crate::free_path::FreeCtx;
use crate::retired::RetiredObject;
use crate::scheme::Scheme;
use crate::timeline::Recorder;

const OFFLINE: u64 = u64::MAX;

pub struct Qsbr {
    counter: CachePadded<AtomicU64>,
    marks: Box<[CachePadded<AtomicU64>]>,
    high_water: CachePadded<AtomicU64>,
}

#[derive(Debug)]
pub struct QsbrLocal {
    seen: u64,
    bags: [(u64, Vec<RetiredObject>); 3],
}

impl QsbrLocal {
    fn held(&self) -> usize {
        self.bags.iter().map(|b| b.1.len()).sum()
    }
}

impl Qsbr {
    pub fn counter(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }

    fn release_old<R: Recorder>(local: &mut QsbrLocal, seen: u64, ctx: &mut FreeCtx<'_, R>) {
        ctx.set_horizon(seen);
        for (stamp, items) in local.bags.iter_mut() {
            if !items.is_empty() && *stamp + 2 <= seen {
                ctx.release(items);
            }
        }
    }
}

impl Scheme for Qsbr {
    type Params = ();
    type Local = QsbrLocal;

    fn new(max_threads: usize, _: &()) -> Self {
        Qsbr {
            counter: CachePadded::new(AtomicU64::new(1)),
            marks: (0..max_threads)
                .map(|_| CachePadded::new(AtomicU64::new(OFFLINE)))
                .collect(),
            high_water: CachePadded::new(AtomicU64::new(0)),
        }
    }

    fn name(&self) -> &'static str {
        "qsbr"
    }

    fn join<R: Recorder>(&self, tid: usize, ctx: &mut FreeCtx<'_, R>) -> QsbrLocal {
        self.high_water.fetch_max(tid as u64 + 1, Ordering::SeqCst);
        let c = self.counter();
        self.marks[tid].store(c, Ordering::SeqCst);
        ctx.set_horizon(c);
        QsbrLocal {
            seen: c,
            bags: std::array::from_fn(|_| (0, Vec::new())),
        }
    }

    fn leave<R: Recorder>(
        &self,
        tid: usize,
        local: &mut QsbrLocal,
        sink: &mut Vec<RetiredObject>,
        _: &mut FreeCtx<'_, R>,
    ) {
        self.marks[tid].store(OFFLINE, Ordering::SeqCst);
        self.collect(local, sink);
    }

    fn begin<R: Recorder>(&self, _: usize, _: &mut QsbrLocal, _: &mut FreeCtx<'_, R>) {}

    fn retire<R: Recorder>(
        &self,
        _: usize,
        local: &mut QsbrLocal,
        mut obj: RetiredObject,
        ctx: &mut FreeCtx<'_, R>,
    ) {
        let stamp = self.counter();
        obj.set_stamp(stamp);
        let (epoch, items) = &mut local.bags[(stamp % 3) as usize];
        if *epoch != stamp {
            if !items.is_empty() {
                ctx.set_horizon(stamp);
                ctx.release(items);
            }
            *epoch = stamp;
        }
        items.push(obj);
    }

    fn end<R: Recorder>(&self, tid: usize, local: &mut QsbrLocal, ctx: &mut FreeCtx<'_, R>) {
        let c = self.counter();
        self.marks[tid].store(c, Ordering::SeqCst);
        let hw = self.high_water.load(Ordering::Acquire) as usize;
        let all_marked = self.marks[..hw].iter().all(|m| {
            let m = m.load(Ordering::SeqCst);
            m == OFFLINE || m >= c
        });
        if all_marked
            && self
                .counter
                .compare_exchange(c, c + 1, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
        {
            ctx.advanced(c + 1);
        }
        let now = self.counter();
        if now != local.seen {
            local.seen = now;
            ctx.epoch_started(now, local.held() + ctx.backlog());
            Self::release_old(local, now, ctx);
        }
    }

    fn collect(&self, local: &mut QsbrLocal, sink: &mut Vec<RetiredObject>) {
        for (_, items) in local.bags.iter_mut() {
            sink.append(items);
        }
    }

    fn held(&self, local: &QsbrLocal) -> usize {
        local.held()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{alloc_block, DeallocTag, Domain, DomainConfig, FreePolicy, NullRecorder};

    fn domain(policy: FreePolicy) -> Domain<Qsbr, NullRecorder> {
        Domain::with_config(
            DomainConfig::default()
                .with_max_threads(4)
                .with_policy(policy)
                .with_debug_oracle(true),
        )
    }

    fn obj() -> RetiredObject {
        unsafe { RetiredObject::new(alloc_block(16), 16, DeallocTag::HEAP) }
    }

    #[test]
    fn single_thread_releases_after_two_quiescent_points() {
        let d = domain(FreePolicy::Batch);
        let mut h = d.register_unbound().unwrap();
        h.begin_op().unwrap();
        h.retire(obj()).unwrap();
        h.end_op().unwrap();
        h.begin_op().unwrap();
        h.end_op().unwrap();
        assert_eq!(d.stats().freed, 1);
        assert_eq!(h.held(), 0);
        assert!(d.oracle_report().unwrap().clean());
    }

    #[test]
    fn thread_stuck_in_operation_blocks_release() {
        let d = domain(FreePolicy::Batch);
        let mut a = d.register_unbound().unwrap();
        let mut b = d.register_unbound().unwrap();
        b.begin_op().unwrap();
        for _ in 0..100 {
            a.begin_op().unwrap();
            a.retire(obj()).unwrap();
            a.end_op().unwrap();
        }
        assert_eq!(d.stats().freed, 0);
        b.end_op().unwrap();
        drop((a, b));
        assert_eq!(d.drain().unwrap(), 100);
    }

    #[test]
    fn offline_threads_do_not_block() {
        let d = domain(FreePolicy::Batch);
        let mut a = d.register_unbound().unwrap();
        drop(d.register_unbound().unwrap());
        for _ in 0..10 {
            a.begin_op().unwrap();
            a.retire(obj()).unwrap();
            a.end_op().unwrap();
        }
        assert!(d.stats().freed >= 8);
    }
}
