use std::sync::atomic::{AtomicU32, Ordering};

use crossbeam_utils::Backoff;

/// FIFO spin lock. Falls back to yielding so waiters cannot starve the
/// holder on an oversubscribed machine.
#[derive(Default)]
pub(crate) struct TicketLock {
    next: AtomicU32,
    serving: AtomicU32,
}

impl TicketLock {
    pub(crate) fn lock(&self) {
        let ticket = self.next.fetch_add(1, Ordering::Relaxed);
        let backoff = Backoff::new();
        while self.serving.load(Ordering::Acquire) != ticket {
            backoff.snooze();
        }
    }

    pub(crate) fn unlock(&self) {
        let s = self.serving.load(Ordering::Relaxed);
        self.serving.store(s.wrapping_add(1), Ordering::Release);
    }
}
