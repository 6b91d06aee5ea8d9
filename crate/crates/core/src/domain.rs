//! Registration, operation bracketing and shutdown drain, shared by every scheme.

use std::cell::{RefCell, UnsafeCell};
use std::marker::PhantomData;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_utils::{Backoff, CachePadded};
use parking_lot::Mutex;

use crate::config::{DomainConfig, FreePolicy};
use crate::error::{Result, SmrError};
use crate::free_path::{bump, oracle_word, state_word, Core, FreeCtx, FreePath, GarbageSample};
use crate::oracle::{op_count, OracleReport};
use crate::retired::{DeallocFn, DeallocTag, RetiredObject};
use crate::scheme::Scheme;
use crate::timeline::{EventBuffer, Recorder, ThreadTrace};

static NEXT_DOMAIN_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static BOUND: RefCell<Vec<u64>> = const { RefCell::new(Vec::new()) };
}

struct Local<S: Scheme, R> {
    scheme: S::Local,
    free: FreePath<R>,
}

struct Shared<S: Scheme, R> {
    id: u64,
    core: Core,
    scheme: S,
    slots: Box<[CachePadded<UnsafeCell<Option<Local<S, R>>>>]>,
    registry: Mutex<()>,
    orphans: Mutex<Vec<RetiredObject>>,
}

// SAFETY: a slot's `Local` is touched only by the thread holding its handle,
// or by `register`/`unregister`/`drain` under `registry` while that thread is
// provably outside the library (unregistered, or parked by a drain flag).
unsafe impl<S: Scheme, R: Send> Sync for Shared<S, R> {}
unsafe impl<S: Scheme, R: Send> Send for Shared<S, R> {}

impl<S: Scheme, R> Shared<S, R> {
    /// # Safety
    ///
    /// Caller must have exclusive access to slot `tid` (see the `Sync` impl).
    #[allow(clippy::mut_from_ref)]
    unsafe fn local(&self, tid: usize) -> &mut Option<Local<S, R>> {
        &mut *self.slots[tid].get()
    }
}

impl<S: Scheme, R> Drop for Shared<S, R> {
    fn drop(&mut self) {
        let orphans = std::mem::take(self.orphans.get_mut());
        let n = orphans.len() as u64;
        for obj in orphans {
            self.core.dealloc(obj, None);
        }
        bump(&self.core.drained, n);
    }
}

/// Lifetime totals across all slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DomainStats {
    pub retired: u64,
    pub freed: u64,
    pub leaked: u64,
    /// Scheme clock advances.
    pub epochs: u64,
    /// Time spent deallocating (amortized frees are sampled).
    pub free_ns: u64,
}

/// A reclamation domain: one scheme instance plus its registered threads.
pub struct Domain<S: Scheme, R: Recorder = EventBuffer> {
    shared: Arc<Shared<S, R>>,
}

impl<S: Scheme, R: Recorder> Clone for Domain<S, R> {
    fn clone(&self) -> Self {
        Domain {
            shared: self.shared.clone(),
        }
    }
}

impl<S: Scheme, R: Recorder> Domain<S, R> {
    pub fn new(config: DomainConfig, params: S::Params) -> Self {
        assert!(config.max_threads >= 1, "max_threads must be at least 1");
        let n = config.max_threads;
        let scheme = S::new(n, &params);
        Domain {
            shared: Arc::new(Shared {
                id: NEXT_DOMAIN_ID.fetch_add(1, Ordering::Relaxed),
                core: Core::new(config),
                scheme,
                slots: (0..n).map(|_| CachePadded::new(UnsafeCell::new(None))).collect(),
                registry: Mutex::new(()),
                orphans: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn with_config(config: DomainConfig) -> Self {
        Self::new(config, S::Params::default())
    }

    pub fn scheme(&self) -> &S {
        &self.shared.scheme
    }

    pub fn name(&self) -> &'static str {
        self.shared.scheme.name()
    }

    pub fn config(&self) -> &DomainConfig {
        &self.shared.core.config
    }

    /// Registers the calling thread.
    pub fn register(&self) -> Result<ThreadHandle<S, R>> {
        let id = self.shared.id;
        if BOUND.with(|b| b.borrow().contains(&id)) {
            return Err(SmrError::AlreadyRegistered);
        }
        let handle = self.register_inner(true)?;
        BOUND.with(|b| b.borrow_mut().push(id));
        Ok(handle)
    }

    /// Registers a handle not tied to the calling thread's identity, so one
    /// OS thread can drive several handles (deterministic schedule tests).
    pub fn register_unbound(&self) -> Result<ThreadHandle<S, R>> {
        self.register_inner(false)
    }

    fn register_inner(&self, bound: bool) -> Result<ThreadHandle<S, R>> {
        let shared = &*self.shared;
        let core = &shared.core;
        let _guard = shared.registry.lock();
        let tid = core
            .registered
            .iter()
            .position(|r| !r.load(Ordering::Acquire))
            .ok_or(SmrError::RingFull)?;
        core.registered[tid].store(true, Ordering::Release);
        core.high_water.fetch_max(tid + 1, Ordering::SeqCst);
        let mut free = FreePath::new(&core.config);
        let scheme = {
            let mut ctx = FreeCtx::new(core, tid, &mut free);
            shared.scheme.join(tid, &mut ctx)
        };
        // SAFETY: the slot was unregistered and we hold the registry lock.
        unsafe { *shared.local(tid) = Some(Local { scheme, free }) };
        let ops = op_count(oracle_word(core.states[tid].load(Ordering::Relaxed)));
        Ok(ThreadHandle {
            shared: self.shared.clone(),
            tid,
            ops,
            in_op: false,
            bound,
            _not_send: PhantomData,
        })
    }

    pub fn registered_threads(&self) -> usize {
        self.shared
            .core
            .registered
            .iter()
            .filter(|r| r.load(Ordering::Acquire))
            .count()
    }

    /// Registers a deallocation routine for objects retired with the returned tag.
    pub fn register_dealloc(&self, routine: DeallocFn) -> Result<DeallocTag> {
        self.shared.core.table.register(routine)
    }

    /// Deallocates everything held in limbo, on freeable lists and from
    /// departed threads. Fails if any registered thread is inside an operation.
    pub fn drain(&self) -> Result<usize> {
        let shared = &*self.shared;
        let core = &shared.core;
        let _guard = shared.registry.lock();
        let hw = core.high_water.load(Ordering::Acquire);
        let mut parked = Vec::new();
        let mut active = false;
        for tid in 0..hw {
            if !core.registered[tid].load(Ordering::Acquire) {
                continue;
            }
            core.drain_flags[tid].store(true, Ordering::SeqCst);
            parked.push(tid);
            if core.states[tid].load(Ordering::SeqCst) & 1 != 0 {
                active = true;
                break;
            }
        }
        if !active {
            let mut sink = std::mem::take(&mut *shared.orphans.lock());
            for &tid in &parked {
                // SAFETY: the owner is quiescent and will wait on its drain flag.
                if let Some(local) = unsafe { shared.local(tid) } {
                    shared.scheme.collect(&mut local.scheme, &mut sink);
                    local.free.list.take_all(&mut sink);
                }
            }
            let n = sink.len();
            for obj in sink {
                core.dealloc(obj, None);
            }
            bump(&core.drained, n as u64);
            for &tid in &parked {
                core.drain_flags[tid].store(false, Ordering::Release);
            }
            return Ok(n);
        }
        for &tid in &parked {
            core.drain_flags[tid].store(false, Ordering::Release);
        }
        Err(SmrError::ThreadsActive)
    }

    pub fn stats(&self) -> DomainStats {
        let core = &self.shared.core;
        let mut s = DomainStats {
            freed: core.drained.load(Ordering::Relaxed),
            ..DomainStats::default()
        };
        for c in core.counters.iter() {
            s.retired += c.retired.load(Ordering::Relaxed);
            s.freed += c.freed.load(Ordering::Relaxed);
            s.leaked += c.leaked.load(Ordering::Relaxed);
            s.epochs += c.epochs.load(Ordering::Relaxed);
            s.free_ns += c.free_ns.load(Ordering::Relaxed);
        }
        s
    }

    /// `None` unless oracle mode is on.
    pub fn oracle_report(&self) -> Option<OracleReport> {
        self.shared.core.oracle.as_ref().map(|o| o.report_totals())
    }

    /// Current operation-state words (`2 * ops + in_op`) of every slot ever registered.
    pub fn op_states(&self) -> Vec<u64> {
        self.shared.core.snapshot_states().into_vec()
    }

    pub fn debug_oracle(&self) -> bool {
        self.shared.core.oracle.is_some()
    }

    pub fn clock_origin_unix_ns(&self) -> u64 {
        self.shared.core.origin_unix_ns
    }

    /// Nanoseconds on the domain's timeline clock.
    pub fn now_ns(&self) -> u64 {
        self.shared.core.now_ns()
    }
}

/// Per-thread registration. Unregisters on drop.
pub struct ThreadHandle<S: Scheme, R: Recorder = EventBuffer> {
    shared: Arc<Shared<S, R>>,
    tid: usize,
    ops: u64,
    in_op: bool,
    bound: bool,
    _not_send: PhantomData<*mut ()>,
}

impl<S: Scheme, R: Recorder> ThreadHandle<S, R> {
    pub fn tid(&self) -> usize {
        self.tid
    }

    /// Number of `begin_op` calls on this slot.
    pub fn op_counter(&self) -> u64 {
        self.ops
    }

    pub fn in_operation(&self) -> bool {
        self.in_op
    }

    #[inline]
    fn parts(&mut self) -> (&Shared<S, R>, &mut Local<S, R>) {
        let shared = &*self.shared;
        // SAFETY: this handle owns the slot while registered.
        let local = unsafe { shared.local(self.tid) }
            .as_mut()
            .expect("registered slot has local state");
        (shared, local)
    }

    pub fn begin_op(&mut self) -> Result<()> {
        if self.in_op {
            return Err(SmrError::OperationOpen);
        }
        let tid = self.tid;
        let core = &self.shared.core;
        let state = &core.states[tid];
        let flag = &core.drain_flags[tid];
        let entering = state_word(2 * self.ops, true);
        loop {
            state.store(entering, Ordering::SeqCst);
            if !flag.load(Ordering::SeqCst) {
                break;
            }
            state.store(state_word(2 * self.ops, false), Ordering::SeqCst);
            let backoff = Backoff::new();
            while flag.load(Ordering::Acquire) {
                backoff.snooze();
            }
        }
        let open = state_word(2 * self.ops + 1, true);
        self.ops += 1;
        self.in_op = true;
        let (shared, local) = self.parts();
        let mut ctx = FreeCtx::new(&shared.core, tid, &mut local.free);
        shared.scheme.begin(tid, &mut local.scheme, &mut ctx);
        if shared.core.config.policy == FreePolicy::Amortized {
            ctx.free_some();
        }
        // The operation counts as open for the oracle only once the scheme
        // protects it: nothing retired earlier is reachable from here on.
        shared.core.states[tid].store(open, Ordering::SeqCst);
        Ok(())
    }

    pub fn end_op(&mut self) -> Result<()> {
        if !self.in_op {
            return Err(SmrError::NoOpenOperation);
        }
        let tid = self.tid;
        let quiet = 2 * self.ops;
        self.in_op = false;
        let (shared, local) = self.parts();
        let state = &shared.core.states[tid];
        state.store(state_word(quiet, true), Ordering::SeqCst);
        let mut ctx = FreeCtx::new(&shared.core, tid, &mut local.free);
        shared.scheme.end(tid, &mut local.scheme, &mut ctx);
        state.store(state_word(quiet, false), Ordering::Release);
        Ok(())
    }

    /// Hands an unlinked object to the scheme.
    pub fn retire(&mut self, mut obj: RetiredObject) -> Result<()> {
        if !self.in_op {
            return Err(SmrError::NotInOperation);
        }
        let tid = self.tid;
        let (shared, local) = self.parts();
        let core = &shared.core;
        if core.oracle.is_some() {
            obj.snapshot = Some(core.snapshot_states());
        }
        bump(&core.counters[tid].retired, 1);
        let mut ctx = FreeCtx::new(core, tid, &mut local.free);
        shared.scheme.retire(tid, &mut local.scheme, obj, &mut ctx);
        Ok(())
    }

    /// Retires a block obtained from [`alloc_block`](crate::alloc_block).
    ///
    /// # Safety
    ///
    /// Same contract as [`RetiredObject::new`] with the heap routine.
    pub unsafe fn retire_block(&mut self, ptr: NonNull<u8>, size: usize) -> Result<()> {
        self.retire(RetiredObject::new(ptr, size, DeallocTag::HEAP))
    }

    /// True when workloads should check node canaries.
    pub fn checks_canaries(&self) -> bool {
        self.shared.core.oracle.is_some()
    }

    pub fn report_canary_hit(&self) {
        if let Some(o) = &self.shared.core.oracle {
            o.note_canary_hit();
        }
    }

    /// Objects in this thread's limbo bags.
    pub fn held(&mut self) -> usize {
        let (shared, local) = self.parts();
        shared.scheme.held(&local.scheme)
    }

    /// Objects waiting on this thread's freeable list.
    pub fn backlog(&mut self) -> usize {
        self.parts().1.free.list.len()
    }

    pub fn garbage_samples(&mut self) -> Vec<GarbageSample> {
        self.parts().1.free.garbage.clone()
    }

    /// Copies out this thread's timeline events.
    pub fn trace(&mut self) -> ThreadTrace {
        let tid = self.tid;
        let rec = &self.parts().1.free.recorder;
        ThreadTrace {
            thread_id: tid,
            events: rec.events(),
            dropped: rec.dropped(),
        }
    }

    /// Forgets recorded events and garbage samples (end of warm-up).
    pub fn clear_trace(&mut self) {
        let free = &mut self.parts().1.free;
        free.recorder.clear();
        free.garbage.clear();
    }

    /// Read-only view of this thread's scheme state.
    pub fn inspect<T>(&mut self, f: impl FnOnce(&S, &S::Local) -> T) -> T {
        let (shared, local) = self.parts();
        f(&shared.scheme, &local.scheme)
    }

    #[cfg(test)]
    pub(crate) fn with_local<T>(&mut self, f: impl FnOnce(&S, &mut S::Local) -> T) -> T {
        let (shared, local) = self.parts();
        f(&shared.scheme, &mut local.scheme)
    }

    pub fn domain(&self) -> Domain<S, R> {
        Domain {
            shared: self.shared.clone(),
        }
    }

    fn unregister(&mut self) {
        if self.in_op {
            let _ = self.end_op();
        }
        let tid = self.tid;
        let shared = &*self.shared;
        let core = &shared.core;
        let _guard = shared.registry.lock();
        // SAFETY: we own the slot; the registry lock excludes drain.
        if let Some(mut local) = unsafe { shared.local(tid) }.take() {
            let mut sink = Vec::new();
            {
                let mut ctx = FreeCtx::new(core, tid, &mut local.free);
                shared.scheme.leave(tid, &mut local.scheme, &mut sink, &mut ctx);
            }
            local.free.list.take_all(&mut sink);
            shared.orphans.lock().extend(sink);
        }
        core.registered[tid].store(false, Ordering::Release);
        if self.bound {
            let id = shared.id;
            let _ = BOUND.try_with(|b| b.borrow_mut().retain(|&d| d != id));
        }
    }
}

impl<S: Scheme, R: Recorder> std::fmt::Debug for ThreadHandle<S, R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThreadHandle")
            .field("scheme", &self.shared.scheme.name())
            .field("tid", &self.tid)
            .field("ops", &self.ops)
            .field("in_op", &self.in_op)
            .finish()
    }
}

impl<S: Scheme, R: Recorder> Drop for ThreadHandle<S, R> {
    fn drop(&mut self) {
        self.unregister();
    }
}
