//! Process-level helpers: resident-set sampling and cpu pinning.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::config::Pin;

/// Current resident set in bytes, from `/proc/self/statm`.
pub fn rss_bytes() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    // SAFETY: sysconf has no preconditions.
    let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    (page > 0).then(|| pages * page as u64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RssSummary {
    pub peak_mib: f64,
    pub samples: usize,
    /// False when the platform gave no RSS reading; `peak_mib` is then 0.
    pub available: bool,
}

/// Background thread recording the peak resident set.
pub struct RssSampler {
    stop: Arc<AtomicBool>,
    worker: JoinHandle<(u64, usize, bool)>,
}

impl RssSampler {
    pub fn start(interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let worker = std::thread::spawn(move || {
            let (mut peak, mut samples, mut ok) = (0u64, 0usize, true);
            loop {
                match rss_bytes() {
                    Some(b) => peak = peak.max(b),
                    None => ok = false,
                }
                samples += 1;
                if flag.load(Ordering::Relaxed) {
                    break;
                }
                std::thread::sleep(interval);
            }
            (peak, samples, ok)
        });
        RssSampler { stop, worker }
    }

    pub fn stop(self) -> RssSummary {
        self.stop.store(true, Ordering::Relaxed);
        let (peak, samples, ok) = self.worker.join().expect("rss sampler panicked");
        if !ok {
            eprintln!("warning: resident set size unavailable; peak reported as 0");
        }
        RssSummary {
            peak_mib: if ok { peak as f64 / (1024.0 * 1024.0) } else { 0.0 },
            samples,
            available: ok,
        }
    }
}

/// Number of cpus this process may run on.
pub fn available_cpus() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Cpu chosen for worker `index` out of `cpus`.
pub fn pin_target(pin: Pin, index: usize, cpus: usize) -> Option<usize> {
    let cpus = cpus.max(1);
    match pin {
        Pin::None => None,
        Pin::Compact => Some(index % cpus),
        Pin::Scatter => {
            let half = cpus.div_ceil(2);
            let slot = index / 2 % half;
            Some(((index % 2) * half + slot).min(cpus - 1))
        }
    }
}

/// Pins the calling thread; failures are reported and ignored.
pub fn pin_current(pin: Pin, index: usize) {
    let Some(cpu) = pin_target(pin, index, available_cpus()) else {
        return;
    };
    // SAFETY: cpu_set_t is plain data and the calls only read it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            eprintln!("warning: could not pin worker {index} to cpu {cpu}");
        }
    }
}
