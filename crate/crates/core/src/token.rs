//! Token-ring epochs.
//!
//! Registered threads form a ring ordered by slot id. A single token
//! circulates; each slot only learns of it through its own `delivered` word,
//! written by whoever passes it along. A thread checks for the token at the
//! start of each operation. Receiving it starts a new local epoch: the
//! current bag becomes the previous bag, and the old previous bag (retired
//! two receipts ago, so the token has made a full circuit since) is freed.
//!
//! Round numbers increase by one each time the token wraps from the highest
//! active id back to a lower one. Receipt is a compare-and-swap on the
//! slot's `received` word so a departing thread and its predecessor can race
//! to forward a token delivered to an inactive slot without duplicating it.

use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crossbeam_utils::CachePadded;

use crate::config::FreePolicy;
use crate::free_path::FreeCtx;
use crate::retired::RetiredObject;
use crate::scheme::Scheme;
use crate::timeline::{EventKind, Recorder};

/// What a thread does between receiving the token and passing it on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenVariant {
    /// Free the previous bag, swap, then pass.
    Naive,
    /// Swap and pass, then free the old previous bag.
    PassFirst,
    /// Like `PassFirst`, but forwards any token that arrives while freeing
    /// after every `k_free` deallocations.
    Periodic,
}

impl TokenVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenVariant::Naive => "token_naive",
            TokenVariant::PassFirst => "token_passfirst",
            TokenVariant::Periodic => "token_periodic",
        }
    }
}

impl FromStr for TokenVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" | "token_naive" => Ok(TokenVariant::Naive),
            "passfirst" | "token_passfirst" => Ok(TokenVariant::PassFirst),
            "periodic" | "token_periodic" => Ok(TokenVariant::Periodic),
            other => Err(format!("unknown token variant `{other}`")),
        }
    }
}

/// Deallocations between token checks while a periodic thread frees a bag.
pub const DEFAULT_K_FREE: usize = 100;

#[derive(Clone, Debug)]
pub struct TokenParams {
    pub variant: TokenVariant,
    pub k_free: usize,
}

impl Default for TokenParams {
    fn default() -> Self {
        TokenParams {
            variant: TokenVariant::Periodic,
            k_free: DEFAULT_K_FREE,
        }
    }
}

#[derive(Default)]
struct RingSlot {
    /// Highest round delivered to this slot.
    delivered: AtomicU64,
    /// Highest round received (claimed) by this slot.
    received: AtomicU64,
    /// Highest round this slot passed on.
    passed: AtomicU64,
    receipts: AtomicU64,
    passes: AtomicU64,
    active: AtomicBool,
}

pub struct TokenRing {
    variant: TokenVariant,
    k_free: usize,
    slots: Box<[CachePadded<RingSlot>]>,
    high_water: CachePadded<AtomicU64>,
    /// Round waiting for the next thread to join (0 if none).
    parked: CachePadded<AtomicU64>,
}

#[derive(Debug, Default)]
pub struct TokenLocal {
    round: u64,
    previous: Vec<RetiredObject>,
    current: Vec<RetiredObject>,
    mid_free_checks: u64,
    mid_free_passes: u64,
}

impl TokenLocal {
    fn held(&self) -> usize {
        self.previous.len() + self.current.len()
    }

    /// Last round received.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn mid_free_checks(&self) -> u64 {
        self.mid_free_checks
    }

    pub fn mid_free_passes(&self) -> u64 {
        self.mid_free_passes
    }
}

/// Snapshot of the ring's round counters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenAudit {
    /// Sum over slots of receipts minus passes: 1 while a thread holds the
    /// token, 0 while it is in flight or parked.
    pub outstanding: i64,
    /// Received rounds of active slots.
    pub active_rounds: Vec<u64>,
}

impl TokenAudit {
    pub fn single_token(&self) -> bool {
        matches!(self.outstanding, 0 | 1)
    }

    /// Largest difference between any two active slots' received rounds.
    pub fn round_spread(&self) -> u64 {
        let max = self.active_rounds.iter().max().copied().unwrap_or(0);
        let min = self.active_rounds.iter().min().copied().unwrap_or(0);
        max - min
    }
}

impl TokenRing {
    pub fn variant(&self) -> TokenVariant {
        self.variant
    }

    pub fn k_free(&self) -> usize {
        self.k_free
    }

    fn hw(&self) -> usize {
        self.high_water.load(Ordering::Acquire) as usize
    }

    pub fn delivered_round(&self, tid: usize) -> u64 {
        self.slots[tid].delivered.load(Ordering::Acquire)
    }

    pub fn received_round(&self, tid: usize) -> u64 {
        self.slots[tid].received.load(Ordering::Acquire)
    }

    pub fn passed_round(&self, tid: usize) -> u64 {
        self.slots[tid].passed.load(Ordering::Acquire)
    }

    pub fn receipts(&self, tid: usize) -> u64 {
        self.slots[tid].receipts.load(Ordering::Acquire)
    }

    pub fn passes(&self, tid: usize) -> u64 {
        self.slots[tid].passes.load(Ordering::Acquire)
    }

    /// Delivers `round` to `tid` as if its predecessor had passed it.
    /// For scripted tests only; bypasses the single-token bookkeeping.
    #[doc(hidden)]
    pub fn inject_delivery(&self, tid: usize, round: u64) {
        self.slots[tid].delivered.fetch_max(round, Ordering::SeqCst);
    }

    fn collect_counters(&self) -> Vec<(u64, u64, u64, bool)> {
        self.slots[..self.hw()]
            .iter()
            .map(|s| {
                (
                    s.receipts.load(Ordering::SeqCst),
                    s.passes.load(Ordering::SeqCst),
                    s.received.load(Ordering::SeqCst),
                    s.active.load(Ordering::SeqCst),
                )
            })
            .collect()
    }

    /// Consistent (double-collect) snapshot of the round counters.
    pub fn audit(&self) -> TokenAudit {
        let mut a = self.collect_counters();
        for _ in 0..10_000 {
            let b = self.collect_counters();
            if a == b {
                break;
            }
            a = b;
            std::hint::spin_loop();
        }
        TokenAudit {
            outstanding: a.iter().map(|c| c.0 as i64 - c.1 as i64).sum(),
            active_rounds: a.iter().filter(|c| c.3 && c.0 > 0).map(|c| c.2).collect(),
        }
    }

    /// Claims a delivered round for `tid` if one is pending.
    fn try_claim(&self, tid: usize, expected: u64) -> Option<u64> {
        let slot = &self.slots[tid];
        let d = slot.delivered.load(Ordering::SeqCst);
        if d <= expected {
            return None;
        }
        match slot
            .received
            .compare_exchange(expected, d, Ordering::SeqCst, Ordering::SeqCst)
        {
            Ok(_) => {
                slot.receipts.fetch_add(1, Ordering::SeqCst);
                Some(d)
            }
            Err(_) => None,
        }
    }

    fn check_receive(&self, tid: usize, local: &mut TokenLocal) -> Option<u64> {
        match self.try_claim(tid, local.round) {
            Some(r) => {
                local.round = r;
                Some(r)
            }
            None => {
                local.round = local.round.max(self.slots[tid].received.load(Ordering::Acquire));
                None
            }
        }
    }

    fn next_active(&self, from: usize) -> Option<usize> {
        let hw = self.hw().max(from + 1);
        (1..=hw)
            .map(|step| (from + step) % hw)
            .find(|&j| self.slots[j].active.load(Ordering::SeqCst))
    }

    /// Passes `round`, held by `from`, to the next active slot.
    fn hand_off<R: Recorder>(&self, mut from: usize, mut round: u64, ctx: &mut FreeCtx<'_, R>) {
        loop {
            let slot = &self.slots[from];
            slot.passed.store(round, Ordering::SeqCst);
            slot.passes.fetch_add(1, Ordering::SeqCst);
            let Some(to) = self.next_active(from) else {
                self.park(round + 1, ctx);
                return;
            };
            let next = if to <= from { round + 1 } else { round };
            if to <= from {
                ctx.advanced(next);
            }
            let target = &self.slots[to];
            target.delivered.fetch_max(next, Ordering::SeqCst);
            ctx.instant(EventKind::TokenPass, next);
            if target.active.load(Ordering::SeqCst) {
                return;
            }
            // The target left after we chose it; forward on its behalf unless
            // its own departure path got there first.
            let r = target.received.load(Ordering::SeqCst);
            match self.try_claim(to, r) {
                Some(claimed) => {
                    from = to;
                    round = claimed;
                }
                None => return,
            }
        }
    }

    fn park<R: Recorder>(&self, round: u64, ctx: &mut FreeCtx<'_, R>) {
        self.parked.store(round, Ordering::SeqCst);
        if let Some(to) = (0..self.hw()).find(|&j| self.slots[j].active.load(Ordering::SeqCst)) {
            let t = self.parked.swap(0, Ordering::SeqCst);
            if t != 0 {
                self.slots[to].delivered.fetch_max(t, Ordering::SeqCst);
                ctx.instant(EventKind::TokenPass, t);
            }
        }
    }

    fn garbage(local: &TokenLocal, extra: usize, backlog: usize) -> usize {
        local.held() + extra + backlog
    }

    /// Frees `old` one object at a time, forwarding any token received on the way.
    fn free_periodically<R: Recorder>(
        &self,
        tid: usize,
        local: &mut TokenLocal,
        old: &mut Vec<RetiredObject>,
        ctx: &mut FreeCtx<'_, R>,
    ) {
        if old.is_empty() {
            return;
        }
        let total = old.len();
        let k = self.k_free;
        let start = ctx.now();
        for (i, obj) in old.drain(..).enumerate() {
            ctx.free_now(obj);
            let done = i + 1;
            if done % k == 0 && done < total {
                local.mid_free_checks += 1;
                if let Some(r) = self.check_receive(tid, local) {
                    local.mid_free_passes += 1;
                    ctx.set_horizon(r);
                    ctx.epoch_started(r, Self::garbage(local, total - done, ctx.backlog()));
                    self.hand_off(tid, r, ctx);
                }
            }
        }
        let end = ctx.now();
        ctx.add_free_time(end - start);
        ctx.record(EventKind::BatchFree, start, end, total as u64);
    }
}

impl Scheme for TokenRing {
    type Params = TokenParams;
    type Local = TokenLocal;

    fn new(max_threads: usize, params: &TokenParams) -> Self {
        assert!(params.k_free >= 1, "k_free must be at least 1");
        TokenRing {
            variant: params.variant,
            k_free: params.k_free,
            slots: (0..max_threads)
                .map(|_| CachePadded::new(RingSlot::default()))
                .collect(),
            high_water: CachePadded::new(AtomicU64::new(0)),
            parked: CachePadded::new(AtomicU64::new(1)),
        }
    }

    fn name(&self) -> &'static str {
        self.variant.as_str()
    }

    fn join<R: Recorder>(&self, tid: usize, ctx: &mut FreeCtx<'_, R>) -> TokenLocal {
        self.high_water.fetch_max(tid as u64 + 1, Ordering::SeqCst);
        let slot = &self.slots[tid];
        let round = slot.received.load(Ordering::SeqCst);
        slot.active.store(true, Ordering::SeqCst);
        let t = self.parked.swap(0, Ordering::SeqCst);
        if t != 0 {
            slot.delivered.fetch_max(t, Ordering::SeqCst);
        }
        ctx.set_horizon(round);
        TokenLocal {
            round,
            ..TokenLocal::default()
        }
    }

    fn leave<R: Recorder>(
        &self,
        tid: usize,
        local: &mut TokenLocal,
        sink: &mut Vec<RetiredObject>,
        ctx: &mut FreeCtx<'_, R>,
    ) {
        self.slots[tid].active.store(false, Ordering::SeqCst);
        let r = self.slots[tid].received.load(Ordering::SeqCst);
        if let Some(round) = self.try_claim(tid, r) {
            self.hand_off(tid, round, ctx);
        }
        self.collect(local, sink);
    }

    fn begin<R: Recorder>(&self, tid: usize, local: &mut TokenLocal, ctx: &mut FreeCtx<'_, R>) {
        let Some(round) = self.check_receive(tid, local) else {
            return;
        };
        ctx.set_horizon(round);
        ctx.epoch_started(round, Self::garbage(local, 0, ctx.backlog()));
        match self.variant {
            TokenVariant::Naive => {
                ctx.release(&mut local.previous);
                std::mem::swap(&mut local.previous, &mut local.current);
                self.hand_off(tid, round, ctx);
            }
            TokenVariant::PassFirst => {
                let mut old = std::mem::take(&mut local.previous);
                local.previous = std::mem::take(&mut local.current);
                self.hand_off(tid, round, ctx);
                ctx.release(&mut old);
                local.current = old;
            }
            TokenVariant::Periodic => {
                let mut old = std::mem::take(&mut local.previous);
                local.previous = std::mem::take(&mut local.current);
                self.hand_off(tid, round, ctx);
                match ctx.policy() {
                    FreePolicy::Amortized => ctx.release(&mut old),
                    FreePolicy::Batch => self.free_periodically(tid, local, &mut old, ctx),
                }
                local.current = old;
            }
        }
    }

    fn retire<R: Recorder>(
        &self,
        _: usize,
        local: &mut TokenLocal,
        mut obj: RetiredObject,
        _: &mut FreeCtx<'_, R>,
    ) {
        obj.set_stamp(local.round);
        local.current.push(obj);
    }

    fn end<R: Recorder>(&self, _: usize, _: &mut TokenLocal, _: &mut FreeCtx<'_, R>) {}

    fn collect(&self, local: &mut TokenLocal, sink: &mut Vec<RetiredObject>) {
        sink.append(&mut local.previous);
        sink.append(&mut local.current);
    }

    fn held(&self, local: &TokenLocal) -> usize {
        local.held()
    }
}
