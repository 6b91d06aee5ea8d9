//! Where released batches go: immediate deallocation or the freeable list,
//! plus the per-thread accounting every scheme shares.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::time::Instant;

use crossbeam_utils::CachePadded;

use crate::amortized::FreeableList;
use crate::config::{DomainConfig, FreePolicy};
use crate::oracle::{GracePeriodOracle, Violation};
use crate::retired::{DeallocTable, RetiredObject};
use crate::timeline::{EventKind, Recorder, TimelineEvent};

/// Amortized frees are timed once every this many calls.
const FREE_SAMPLE_EVERY: u32 = 64;

/// Owner-written per-slot counters. Readers only need eventual values.
#[derive(Default)]
pub(crate) struct SlotCounters {
    pub retired: AtomicU64,
    pub freed: AtomicU64,
    pub leaked: AtomicU64,
    pub epochs: AtomicU64,
    pub free_ns: AtomicU64,
}

/// Single-writer increment: no read-modify-write needed.
#[inline]
pub(crate) fn bump(counter: &AtomicU64, by: u64) {
    counter.store(counter.load(Ordering::Relaxed) + by, Ordering::Relaxed);
}

/// State word layout: bit 0 is "busy" (inside the library on this slot's
/// behalf), the rest is the oracle word `2 * ops + in_op`.
#[inline]
pub(crate) fn state_word(oracle_word: u64, busy: bool) -> u64 {
    (oracle_word << 1) | busy as u64
}

#[inline]
pub(crate) fn oracle_word(state: u64) -> u64 {
    state >> 1
}

/// Scheme-independent shared state.
pub(crate) struct Core {
    pub config: DomainConfig,
    pub table: DeallocTable,
    pub oracle: Option<GracePeriodOracle>,
    pub states: Box<[CachePadded<AtomicU64>]>,
    pub drain_flags: Box<[CachePadded<AtomicBool>]>,
    pub registered: Box<[AtomicBool]>,
    /// One past the highest slot id ever registered.
    pub high_water: AtomicUsize,
    pub counters: Box<[CachePadded<SlotCounters>]>,
    /// Objects freed by `drain` and at teardown.
    pub drained: AtomicU64,
    pub origin: Instant,
    pub origin_unix_ns: u64,
}

impl Core {
    pub(crate) fn new(config: DomainConfig) -> Self {
        let n = config.max_threads;
        let oracle = config
            .debug_oracle
            .then(|| GracePeriodOracle::new(config.abort_on_violation));
        Core {
            table: DeallocTable::new(),
            oracle,
            states: (0..n).map(|_| CachePadded::new(AtomicU64::new(0))).collect(),
            drain_flags: (0..n).map(|_| CachePadded::new(AtomicBool::new(false))).collect(),
            registered: (0..n).map(|_| AtomicBool::new(false)).collect(),
            high_water: AtomicUsize::new(0),
            counters: (0..n).map(|_| CachePadded::new(SlotCounters::default())).collect(),
            drained: AtomicU64::new(0),
            origin: Instant::now(),
            origin_unix_ns: crate::timeline::unix_now_ns(),
            config,
        }
    }

    #[inline]
    pub(crate) fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    pub(crate) fn snapshot_states(&self) -> Box<[u64]> {
        let hw = self.high_water.load(Ordering::Acquire);
        self.states[..hw]
            .iter()
            .map(|s| oracle_word(s.load(Ordering::SeqCst)))
            .collect()
    }

    /// Deallocates (or, in oracle mode, checks and quarantines) one object.
    /// `horizon` is the freeing thread's scheme clock; `None` skips the clock check.
    pub(crate) fn dealloc(&self, obj: RetiredObject, horizon: Option<u64>) {
        match &self.oracle {
            None => {
                // SAFETY: the scheme only releases objects whose grace period has elapsed.
                unsafe { self.table.release(&obj) };
            }
            Some(oracle) => {
                if let Some(h) = horizon {
                    if obj.retire_stamp() + 2 > h {
                        oracle.report(Violation::SchemeHorizon {
                            retire_stamp: obj.retire_stamp(),
                            horizon: h,
                        });
                    }
                }
                oracle.check_free(&obj, |j| oracle_word(self.states[j].load(Ordering::SeqCst)));
                oracle.quarantine(obj);
            }
        }
    }
}

impl Drop for Core {
    fn drop(&mut self) {
        if let Some(oracle) = &self.oracle {
            oracle.release_quarantine(&self.table);
        }
    }
}

/// Garbage held by a thread when it started a new epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GarbageSample {
    pub epoch: u64,
    pub garbage: u64,
    pub at_ns: u64,
}

/// Thread-local release machinery: recorder, freeable list, garbage series.
pub struct FreePath<R> {
    pub(crate) recorder: R,
    pub(crate) list: FreeableList,
    pub(crate) garbage: Vec<GarbageSample>,
    garbage_capacity: usize,
    pub(crate) horizon: u64,
    sample_tick: u32,
}

impl<R: Recorder> FreePath<R> {
    pub(crate) fn new(config: &DomainConfig) -> Self {
        FreePath {
            recorder: R::with_capacity(config.timeline_capacity, config.timeline_overflow),
            list: FreeableList::new(config.af_quota, config.af_high_water),
            garbage: Vec::with_capacity(config.garbage_capacity),
            garbage_capacity: config.garbage_capacity,
            horizon: 0,
            sample_tick: 0,
        }
    }
}

/// What a scheme sees of its thread while running a hook.
pub struct FreeCtx<'a, R: Recorder> {
    pub(crate) core: &'a Core,
    pub(crate) tid: usize,
    pub(crate) path: &'a mut FreePath<R>,
}

impl<'a, R: Recorder> FreeCtx<'a, R> {
    pub(crate) fn new(core: &'a Core, tid: usize, path: &'a mut FreePath<R>) -> Self {
        FreeCtx { core, tid, path }
    }

    pub fn tid(&self) -> usize {
        self.tid
    }

    pub fn policy(&self) -> FreePolicy {
        self.core.config.policy
    }

    /// Nanoseconds since the domain's clock origin.
    #[inline]
    pub fn now(&self) -> u64 {
        self.core.now_ns()
    }

    #[inline]
    pub fn record(&mut self, kind: EventKind, start_ns: u64, end_ns: u64, value: u64) {
        if R::ENABLED {
            self.path
                .recorder
                .record(TimelineEvent::interval(kind, start_ns, end_ns, value));
        }
    }

    #[inline]
    pub fn instant(&mut self, kind: EventKind, value: u64) {
        if R::ENABLED {
            let now = self.now();
            self.path.recorder.record(TimelineEvent::instant(kind, now, value));
        }
    }

    /// Raises the thread's view of the scheme clock used by the oracle's clock check.
    #[inline]
    pub fn set_horizon(&mut self, clock: u64) {
        self.path.horizon = self.path.horizon.max(clock);
    }

    /// Objects waiting on the freeable list.
    #[inline]
    pub fn backlog(&self) -> usize {
        self.path.list.len()
    }

    /// Hands a safe batch to the free path and leaves `batch` empty.
    pub fn release(&mut self, batch: &mut Vec<RetiredObject>) {
        if batch.is_empty() {
            return;
        }
        match self.core.config.policy {
            FreePolicy::Amortized => self.path.list.enqueue_batch(std::mem::take(batch)),
            FreePolicy::Batch => {
                let n = batch.len() as u64;
                let start = self.now();
                for obj in batch.drain(..) {
                    self.free_now(obj);
                }
                let end = self.now();
                bump(&self.core.counters[self.tid].free_ns, end - start);
                self.record(EventKind::BatchFree, start, end, n);
            }
        }
    }

    /// Deallocates one safe object right away, bypassing the policy.
    #[inline]
    pub fn free_now(&mut self, obj: RetiredObject) {
        free_one(self.core, self.tid, self.path.horizon, &mut self.path.recorder, obj);
    }

    /// Adds the time spent freeing outside [`FreeCtx::release`].
    pub fn add_free_time(&mut self, ns: u64) {
        bump(&self.core.counters[self.tid].free_ns, ns);
    }

    /// Runs one per-operation quota of the freeable list.
    pub(crate) fn free_some(&mut self) -> usize {
        if self.path.list.is_empty() {
            return 0;
        }
        self.path.sample_tick = self.path.sample_tick.wrapping_add(1);
        let timed = self.path.sample_tick % FREE_SAMPLE_EVERY == 0;
        let start = if timed { self.now() } else { 0 };
        let FreePath {
            list,
            recorder,
            horizon,
            ..
        } = &mut *self.path;
        let (core, tid, horizon) = (self.core, self.tid, *horizon);
        let n = list.free_some(|obj| free_one(core, tid, horizon, recorder, obj));
        if timed {
            let spent = self.now() - start;
            bump(&core.counters[tid].free_ns, spent * FREE_SAMPLE_EVERY as u64);
        }
        n
    }

    /// Notes the start of a new epoch with `garbage` unreclaimed objects.
    pub fn epoch_started(&mut self, epoch: u64, garbage: usize) {
        let at_ns = self.now();
        if self.path.garbage.len() < self.path.garbage_capacity {
            self.path.garbage.push(GarbageSample {
                epoch,
                garbage: garbage as u64,
                at_ns,
            });
        }
        self.record(EventKind::GarbageCount, at_ns, at_ns, garbage as u64);
    }

    /// Notes that this thread advanced the scheme clock to `epoch`.
    pub fn advanced(&mut self, epoch: u64) {
        bump(&self.core.counters[self.tid].epochs, 1);
        self.instant(EventKind::EpochAdvance, epoch);
    }

    pub fn note_leak(&mut self) {
        bump(&self.core.counters[self.tid].leaked, 1);
    }

    pub(crate) fn report(&self, violation: Violation) {
        if let Some(oracle) = &self.core.oracle {
            oracle.report(violation);
        }
    }

    pub(crate) fn checking(&self) -> bool {
        self.core.oracle.is_some()
    }
}

#[inline]
fn free_one<R: Recorder>(
    core: &Core,
    tid: usize,
    horizon: u64,
    recorder: &mut R,
    obj: RetiredObject,
) {
    match core.config.single_free_threshold_ns {
        Some(threshold) if R::ENABLED => {
            let start = core.now_ns();
            core.dealloc(obj, Some(horizon));
            let end = core.now_ns();
            if end - start >= threshold {
                recorder.record(TimelineEvent::interval(EventKind::SingleFree, start, end, 1));
            }
        }
        _ => core.dealloc(obj, Some(horizon)),
    }
    bump(&core.counters[tid].freed, 1);
}
