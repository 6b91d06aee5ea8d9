//! DEBRA-style epoch-based reclamation.
//!
//! A global epoch plus one announcement word per thread. At the start of each
//! operation a thread announces the global epoch; every `scan_every`
//! operations it checks one other thread's announcement, round robin. A
//! thread whose cursor completes a circuit with every thread either
//! quiescent or current tries to advance the epoch by one.
//!
//! Retired objects land in one of three bags indexed by retire epoch mod 3.
//! A bag stamped `e` is released once the thread has seen epoch `e + 2`.

use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_utils::CachePadded;

use crate::free_path::FreeCtx;
use crate::oracle::Violation;
use crate::retired::RetiredObject;
use crate::scheme::Scheme;
use crate::timeline::Recorder;

const QUIESCENT: u64 = 1;

#[inline]
fn announcement(epoch: u64) -> u64 {
    epoch << 1
}

#[derive(Clone, Debug)]
pub struct EbrParams {
    /// Operations between scan steps (1 = a step every operation).
    pub scan_every: u64,
    /// First global epoch.
    pub initial_epoch: u64,
}

impl Default for EbrParams {
    fn default() -> Self {
        EbrParams {
            scan_every: 1,
            initial_epoch: 2,
        }
    }
}

pub struct Ebr {
    global: CachePadded<AtomicU64>,
    announce: Box<[CachePadded<AtomicU64>]>,
    high_water: CachePadded<AtomicU64>,
    scan_every: u64,
}

#[derive(Debug)]
struct Bag {
    epoch: u64,
    items: Vec<RetiredObject>,
}

#[derive(Debug)]
pub struct EbrLocal {
    /// Last epoch this thread announced.
    epoch: u64,
    bags: [Bag; 3],
    scan_epoch: u64,
    cursor: usize,
    ops: u64,
}

impl EbrLocal {
    fn held(&self) -> usize {
        self.bags.iter().map(|b| b.items.len()).sum()
    }
}

impl Ebr {
    pub fn global_epoch(&self) -> u64 {
        self.global.load(Ordering::SeqCst)
    }

    /// `None` while `tid` is quiescent.
    pub fn announced(&self, tid: usize) -> Option<u64> {
        let a = self.announce[tid].load(Ordering::SeqCst);
        (a & QUIESCENT == 0).then_some(a >> 1)
    }

    fn hw(&self) -> usize {
        self.high_water.load(Ordering::Acquire) as usize
    }

    /// One step of the round-robin scan. Returns true if this call advanced the epoch.
    fn scan_step<R: Recorder>(&self, local: &mut EbrLocal, g: u64, ctx: &mut FreeCtx<'_, R>) -> bool {
        if local.scan_epoch != g {
            local.scan_epoch = g;
            local.cursor = 0;
        }
        let hw = self.hw();
        if local.cursor < hw {
            let a = self.announce[local.cursor].load(Ordering::SeqCst);
            if a & QUIESCENT != 0 || a >> 1 == g {
                local.cursor += 1;
            }
        }
        if local.cursor < hw {
            return false;
        }
        local.cursor = 0;
        if self
            .global
            .compare_exchange(g, g + 1, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            return false;
        }
        ctx.advanced(g + 1);
        if ctx.checking() {
            for (thread, slot) in self.announce[..hw].iter().enumerate() {
                let a = slot.load(Ordering::SeqCst);
                if a & QUIESCENT == 0 && a >> 1 < g {
                    ctx.report(Violation::EpochAdvance {
                        thread,
                        announced: a >> 1,
                        advanced_from: g,
                    });
                }
            }
        }
        true
    }

    fn release_old<R: Recorder>(local: &mut EbrLocal, seen: u64, ctx: &mut FreeCtx<'_, R>) {
        ctx.set_horizon(seen);
        for bag in local.bags.iter_mut() {
            if !bag.items.is_empty() && bag.epoch + 2 <= seen {
                ctx.release(&mut bag.items);
            }
        }
    }
}

impl Scheme for Ebr {
    type Params = EbrParams;
    type Local = EbrLocal;

    fn new(max_threads: usize, params: &EbrParams) -> Self {
        assert!(params.scan_every >= 1, "scan_every must be at least 1");
        Ebr {
            global: CachePadded::new(AtomicU64::new(params.initial_epoch)),
            announce: (0..max_threads)
                .map(|_| CachePadded::new(AtomicU64::new(QUIESCENT)))
                .collect(),
            high_water: CachePadded::new(AtomicU64::new(0)),
            scan_every: params.scan_every,
        }
    }

    fn name(&self) -> &'static str {
        "debra"
    }

    fn join<R: Recorder>(&self, tid: usize, ctx: &mut FreeCtx<'_, R>) -> EbrLocal {
        self.high_water.fetch_max(tid as u64 + 1, Ordering::SeqCst);
        let g = self.global_epoch();
        ctx.set_horizon(g);
        EbrLocal {
            epoch: g,
            bags: std::array::from_fn(|_| Bag {
                epoch: 0,
                items: Vec::new(),
            }),
            scan_epoch: g,
            cursor: 0,
            ops: 0,
        }
    }

    fn leave<R: Recorder>(
        &self,
        tid: usize,
        local: &mut EbrLocal,
        sink: &mut Vec<RetiredObject>,
        _: &mut FreeCtx<'_, R>,
    ) {
        self.announce[tid].store(QUIESCENT, Ordering::SeqCst);
        self.collect(local, sink);
    }

    fn begin<R: Recorder>(&self, tid: usize, local: &mut EbrLocal, ctx: &mut FreeCtx<'_, R>) {
        // Re-read after announcing so a published epoch was still current at
        // some instant after it became visible.
        let mut g = self.global.load(Ordering::SeqCst);
        loop {
            self.announce[tid].store(announcement(g), Ordering::SeqCst);
            let again = self.global.load(Ordering::SeqCst);
            if again == g {
                break;
            }
            g = again;
        }
        if g != local.epoch {
            local.epoch = g;
            ctx.epoch_started(g, local.held() + ctx.backlog());
            Self::release_old(local, g, ctx);
        }
        local.ops += 1;
        if local.ops % self.scan_every == 0 {
            self.scan_step(local, g, ctx);
        }
    }

    fn retire<R: Recorder>(
        &self,
        _: usize,
        local: &mut EbrLocal,
        mut obj: RetiredObject,
        ctx: &mut FreeCtx<'_, R>,
    ) {
        let stamp = self.global.load(Ordering::SeqCst);
        obj.set_stamp(stamp);
        let bag = &mut local.bags[(stamp % 3) as usize];
        if bag.epoch != stamp {
            if !bag.items.is_empty() {
                // The bag is from epoch stamp - 3 or older, safe since stamp >= its epoch + 2.
                ctx.set_horizon(stamp);
                ctx.release(&mut bag.items);
            }
            bag.epoch = stamp;
        }
        bag.items.push(obj);
    }

    fn end<R: Recorder>(&self, tid: usize, _: &mut EbrLocal, _: &mut FreeCtx<'_, R>) {
        self.announce[tid].store(QUIESCENT, Ordering::SeqCst);
    }

    fn collect(&self, local: &mut EbrLocal, sink: &mut Vec<RetiredObject>) {
        for bag in local.bags.iter_mut() {
            sink.append(&mut bag.items);
        }
    }

    fn held(&self, local: &EbrLocal) -> usize {
        local.held()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{alloc_block, DeallocTag, Domain, DomainConfig, FreePolicy, NullRecorder};

    type D = Domain<Ebr, NullRecorder>;

    fn domain(scan_every: u64, policy: FreePolicy) -> D {
        Domain::new(
            DomainConfig::default()
                .with_max_threads(4)
                .with_policy(policy)
                .with_debug_oracle(true),
            EbrParams {
                scan_every,
                ..EbrParams::default()
            },
        )
    }

    fn obj() -> RetiredObject {
        unsafe { RetiredObject::new(alloc_block(32), 32, DeallocTag::HEAP) }
    }

    #[test]
    fn begin_announces_global_epoch() {
        let d = domain(1_000_000, FreePolicy::Batch);
        let mut h = d.register_unbound().unwrap();
        assert_eq!(d.scheme().announced(0), None);
        h.begin_op().unwrap();
        assert_eq!(d.scheme().announced(0), Some(d.scheme().global_epoch()));
        h.end_op().unwrap();
        assert_eq!(d.scheme().announced(0), None);
    }

    #[test]
    fn unchanged_epoch_does_not_rotate() {
        let d = domain(1_000_000, FreePolicy::Batch);
        let mut h = d.register_unbound().unwrap();
        h.begin_op().unwrap();
        h.retire(obj()).unwrap();
        h.end_op().unwrap();
        h.begin_op().unwrap();
        assert_eq!(h.held(), 1);
        h.end_op().unwrap();
        assert_eq!(d.stats().freed, 0);
    }

    #[test]
    fn single_thread_advances_every_op() {
        let d = domain(1, FreePolicy::Batch);
        let mut h = d.register_unbound().unwrap();
        let start = d.scheme().global_epoch();
        for _ in 0..7 {
            h.begin_op().unwrap();
            h.retire(obj()).unwrap();
            h.end_op().unwrap();
        }
        assert_eq!(d.scheme().global_epoch(), start + 7);
        // The three youngest epochs' bags stay in limbo.
        assert_eq!(h.held(), 3);
        assert_eq!(d.stats().freed + h.held() as u64, 7);
        drop(h);
        d.drain().unwrap();
        assert_eq!(d.stats().freed, 7);
        assert!(d.oracle_report().unwrap().clean());
    }

    #[test]
    fn retire_stamps_follow_global_epoch() {
        let d = domain(1_000_000, FreePolicy::Batch);
        let mut a = d.register_unbound().unwrap();
        a.begin_op().unwrap();
        let e = d.scheme().global_epoch();
        a.retire(obj()).unwrap();
        a.retire(obj()).unwrap();
        d.scheme().global.store(e + 1, Ordering::SeqCst);
        a.retire(obj()).unwrap();
        let mut sink = Vec::new();
        a.with_local(|s, l| s.collect(l, &mut sink));
        let stamps: Vec<u64> = sink.iter().map(|o| o.retire_stamp()).collect();
        let mut sorted = stamps.clone();
        sorted.sort();
        assert_eq!(sorted, vec![e, e, e + 1]);
        for o in sink {
            unsafe { crate::free_block(o.ptr(), o.size_bytes()) };
        }
        a.end_op().unwrap();
    }

    #[test]
    fn stale_active_thread_blocks_advance() {
        let d = domain(1, FreePolicy::Batch);
        let mut hs: Vec<_> = (0..3).map(|_| d.register_unbound().unwrap()).collect();
        hs[2].begin_op().unwrap();
        let e = d.scheme().global_epoch();
        for _ in 0..3 {
            hs[0].begin_op().unwrap();
            hs[0].end_op().unwrap();
        }
        // One advance is possible (thread 2 announced e); then it blocks.
        assert_eq!(d.scheme().global_epoch(), e + 1);
        for _ in 0..20 {
            hs[0].begin_op().unwrap();
            hs[0].end_op().unwrap();
            hs[1].begin_op().unwrap();
            hs[1].end_op().unwrap();
        }
        assert_eq!(d.scheme().global_epoch(), e + 1);
        hs[2].end_op().unwrap();
    }

    #[test]
    fn bag_from_two_epochs_back_is_released() {
        let d = domain(1_000_000, FreePolicy::Batch);
        let mut h = d.register_unbound().unwrap();
        let e = d.scheme().global_epoch();
        h.begin_op().unwrap();
        h.retire(obj()).unwrap();
        h.end_op().unwrap();
        d.scheme().global.store(e + 1, Ordering::SeqCst);
        h.begin_op().unwrap();
        h.end_op().unwrap();
        assert_eq!(d.stats().freed, 0);
        d.scheme().global.store(e + 2, Ordering::SeqCst);
        h.begin_op().unwrap();
        assert_eq!(d.stats().freed, 1);
        h.end_op().unwrap();
    }

    #[test]
    fn amortized_policy_conserves() {
        let d = domain(1, FreePolicy::Amortized);
        let mut h = d.register_unbound().unwrap();
        for _ in 0..1000 {
            h.begin_op().unwrap();
            h.retire(obj()).unwrap();
            h.retire(obj()).unwrap();
            h.end_op().unwrap();
        }
        let s = d.stats();
        assert_eq!(s.retired, 2000);
        assert!(s.freed < 2000);
        drop(h);
        d.drain().unwrap();
        assert_eq!(d.stats().freed, 2000);
    }
}
