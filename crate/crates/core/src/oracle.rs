//! Debug-mode grace-period oracle.
//!
//! Every registered slot publishes an operation state word: `2 * ops + 1`
//! while an operation is open, `2 * ops` otherwise. A retire snapshots every
//! slot's word. At free time the object is safe iff each slot that was inside
//! an operation at retire time has since left that operation, i.e. its word
//! has moved past the snapshot value. Slots that were quiescent at retire
//! time cannot hold a reference: any operation they start afterwards begins
//! after the unlink.
//!
//! In oracle mode freed objects are poisoned and quarantined instead of being
//! released, so use-after-free reads hit a canary deterministically and
//! addresses are never recycled (making the freed-set a double-free detector).

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::retired::{canary, DeallocTable, RetiredObject};

/// True if the state word marks an open operation.
#[inline]
pub fn in_operation(state: u64) -> bool {
    state & 1 == 1
}

/// Number of `begin_op` calls encoded in a state word.
#[inline]
pub fn op_count(state: u64) -> u64 {
    state.div_ceil(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail {
        thread: usize,
        retire_state: u64,
        now_state: u64,
    },
}

impl Verdict {
    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }
}

/// Decides whether an object retired with `snapshot` may be freed when the
/// slots read `now`.
pub fn verdict(snapshot: &[u64], now: impl Fn(usize) -> u64) -> Verdict {
    for (thread, &retire_state) in snapshot.iter().enumerate() {
        if !in_operation(retire_state) {
            continue;
        }
        let now_state = now(thread);
        if now_state <= retire_state {
            return Verdict::Fail {
                thread,
                retire_state,
                now_state,
            };
        }
    }
    Verdict::Pass
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    GracePeriod {
        thread: usize,
        retire_stamp: u64,
        snapshot: Vec<u64>,
        now_state: u64,
    },
    /// The scheme's own clock had not moved two steps past the stamp.
    SchemeHorizon { retire_stamp: u64, horizon: u64 },
    DoubleFree { addr: usize },
    /// An epoch advanced while a non-quiescent thread still announced an older one.
    EpochAdvance { thread: usize, announced: u64, advanced_from: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::GracePeriod {
                thread,
                retire_stamp,
                snapshot,
                now_state,
            } => write!(
                f,
                "grace period violated: thread {thread} still in the operation open at retire \
                 (retire stamp {retire_stamp}, snapshot {snapshot:?}, now {now_state})"
            ),
            Violation::SchemeHorizon {
                retire_stamp,
                horizon,
            } => write!(
                f,
                "freed before its scheme clock advanced twice: retire stamp {retire_stamp}, clock {horizon}"
            ),
            Violation::DoubleFree { addr } => write!(f, "double free of {addr:#x}"),
            Violation::EpochAdvance {
                thread,
                announced,
                advanced_from,
            } => write!(
                f,
                "epoch advanced from {advanced_from} while thread {thread} was active in epoch {announced}"
            ),
        }
    }
}

/// Totals reported by the oracle.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OracleReport {
    pub checked: u64,
    pub violations: u64,
    pub canary_hits: u64,
    pub quarantined: u64,
    pub first_violation: Option<String>,
}

impl OracleReport {
    pub fn clean(&self) -> bool {
        self.violations == 0 && self.canary_hits == 0
    }
}

pub struct GracePeriodOracle {
    abort_on_violation: bool,
    checked: AtomicU64,
    violations: AtomicU64,
    canary_hits: AtomicU64,
    first_violation: Mutex<Option<String>>,
    freed: Mutex<HashSet<usize>>,
    quarantine: Mutex<Vec<RetiredObject>>,
}

impl GracePeriodOracle {
    pub fn new(abort_on_violation: bool) -> Self {
        GracePeriodOracle {
            abort_on_violation,
            checked: AtomicU64::new(0),
            violations: AtomicU64::new(0),
            canary_hits: AtomicU64::new(0),
            first_violation: Mutex::new(None),
            freed: Mutex::new(HashSet::new()),
            quarantine: Mutex::new(Vec::new()),
        }
    }

    /// Checks `obj` against the current slot states. Violations are reported
    /// (and abort the process in abort mode).
    pub fn check_free(&self, obj: &RetiredObject, now: impl Fn(usize) -> u64) -> Verdict {
        self.checked.fetch_add(1, Ordering::Relaxed);
        let Some(snapshot) = obj.snapshot() else {
            return Verdict::Pass;
        };
        let v = verdict(snapshot, now);
        if let Verdict::Fail {
            thread, now_state, ..
        } = v
        {
            self.report(Violation::GracePeriod {
                thread,
                retire_stamp: obj.retire_stamp(),
                snapshot: snapshot.to_vec(),
                now_state,
            });
        }
        v
    }

    pub fn report(&self, violation: Violation) {
        if self.abort_on_violation {
            eprintln!("smr oracle: {violation}");
            std::process::exit(2);
        }
        self.violations.fetch_add(1, Ordering::Relaxed);
        let mut first = self.first_violation.lock();
        if first.is_none() {
            *first = Some(violation.to_string());
        }
    }

    pub fn note_canary_hit(&self) {
        self.canary_hits.fetch_add(1, Ordering::Relaxed);
    }

    /// Poisons and parks `obj` instead of deallocating it.
    pub(crate) fn quarantine(&self, mut obj: RetiredObject) {
        let addr = obj.ptr().as_ptr() as usize;
        if !self.freed.lock().insert(addr) {
            self.report(Violation::DoubleFree { addr });
            return;
        }
        // SAFETY: the object passed (or was reported by) the grace check and
        // stays allocated until `release_quarantine`.
        unsafe { canary::poison(obj.ptr(), obj.size_bytes()) };
        obj.snapshot = None;
        self.quarantine.lock().push(obj);
    }

    /// Really deallocates everything in quarantine. Call only when no thread
    /// can touch the data structures any more.
    pub(crate) fn release_quarantine(&self, table: &DeallocTable) -> usize {
        let parked = std::mem::take(&mut *self.quarantine.lock());
        let n = parked.len();
        let mut freed = self.freed.lock();
        for obj in parked {
            freed.remove(&(obj.ptr().as_ptr() as usize));
            // SAFETY: quarantined objects passed their grace check and nobody
            // is running against this domain.
            unsafe { table.release(&obj) };
        }
        n
    }

    pub fn report_totals(&self) -> OracleReport {
        OracleReport {
            checked: self.checked.load(Ordering::Relaxed),
            violations: self.violations.load(Ordering::Relaxed),
            canary_hits: self.canary_hits.load(Ordering::Relaxed),
            quarantined: self.quarantine.lock().len() as u64,
            first_violation: self.first_violation.lock().clone(),
        }
    }
}
