//! Remote-batch-free probe: each thread frees a batch of objects that a
//! neighbour allocated, either all at once or one per loop iteration, and
//! the latency of every free is measured.

use std::alloc::{alloc, dealloc, Layout};
use std::fs;
use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::sync::{Barrier, Mutex};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use smr_core::FreePolicy;

/// Frees at least this long count as slow.
pub const SLOW_FREE_NS: u64 = 100_000;

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub threads: usize,
    pub object_size: usize,
    pub batch: usize,
    pub mode: FreePolicy,
    /// Exchange rounds; each thread frees `batch` objects per round.
    pub rounds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            threads: 8,
            object_size: smr_workloads::DEFAULT_NODE_SIZE,
            batch: smr_core::REFERENCE_BATCH,
            mode: FreePolicy::Batch,
            rounds: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub threads: usize,
    pub object_size: usize,
    pub batch: usize,
    pub mode: FreePolicy,
    pub rounds: usize,
    pub allocs: u64,
    pub frees: u64,
    /// Frees of objects allocated by a different thread.
    pub remote_frees: u64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
    pub slow_frees: u64,
    /// Power-of-two latency buckets: `(upper bound ns, count)`.
    pub histogram: Vec<(u64, u64)>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Counts per power-of-two bucket; bucket `b` holds values in `(2^(b-1), 2^b]`.
pub fn log2_histogram(values: &[u64]) -> Vec<(u64, u64)> {
    let mut counts = [0u64; 65];
    for &v in values {
        let b = if v <= 1 { 0 } else { 64 - (v - 1).leading_zeros() as usize };
        counts[b] += 1;
    }
    let last = counts.iter().rposition(|&c| c > 0).map_or(0, |i| i + 1);
    counts[..last]
        .iter()
        .enumerate()
        .map(|(b, &c)| (if b == 64 { u64::MAX } else { 1u64 << b }, c))
        .collect()
}

/// Stand-in for one data-structure operation between two amortized frees.
#[inline(never)]
fn filler(layout: Layout) {
    // SAFETY: non-zero size layout; freed right away by this thread.
    unsafe {
        let p = alloc(layout);
        assert!(!p.is_null(), "allocation failed");
        p.write_volatile(1);
        let mut x = black_box(p as u64);
        for _ in 0..32 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        }
        black_box(x);
        dealloc(p, layout);
    }
}

struct Addr(usize);

pub fn run(cfg: &ProbeConfig) -> Result<ProbeResult> {
    if cfg.batch == 0 {
        bail!("batch must be at least 1");
    }
    if cfg.threads == 0 || cfg.object_size == 0 || cfg.rounds == 0 {
        bail!("threads, object size and rounds must be positive");
    }
    let m = cfg.threads;
    let layout = Layout::from_size_align(cfg.object_size, 8)?;
    let slots: Vec<Mutex<Vec<Addr>>> = (0..m).map(|_| Mutex::new(Vec::new())).collect();
    let barrier = Barrier::new(m);
    let per_thread = cfg.batch * cfg.rounds;

    let mut latencies: Vec<u64> = Vec::with_capacity(per_thread * m);
    let mut remote = 0u64;
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..m)
            .map(|i| {
                let (slots, barrier) = (&slots, &barrier);
                s.spawn(move || {
                    let mut lat = Vec::with_capacity(per_thread);
                    let mut victim: Vec<Addr> = Vec::with_capacity(cfg.batch);
                    let from = (i + 1) % m;
                    for _ in 0..cfg.rounds {
                        let mine: Vec<Addr> = (0..cfg.batch)
                            .map(|_| {
                                // SAFETY: non-zero size layout.
                                let p = unsafe { alloc(layout) };
                                assert!(!p.is_null(), "allocation failed");
                                Addr(p as usize)
                            })
                            .collect();
                        *slots[i].lock().unwrap() = mine;
                        barrier.wait();
                        std::mem::swap(&mut victim, &mut *slots[from].lock().unwrap());
                        barrier.wait();
                        let free = |a: &Addr, lat: &mut Vec<u64>| {
                            let t = Instant::now();
                            // SAFETY: allocated above with `layout`, freed once.
                            unsafe { dealloc(a.0 as *mut u8, layout) };
                            lat.push(t.elapsed().as_nanos() as u64);
                        };
                        match cfg.mode {
                            FreePolicy::Batch => {
                                for a in victim.drain(..) {
                                    free(&a, &mut lat);
                                }
                                for _ in 0..cfg.batch {
                                    filler(layout);
                                }
                            }
                            FreePolicy::Amortized => {
                                for a in victim.drain(..) {
                                    free(&a, &mut lat);
                                    filler(layout);
                                }
                            }
                        }
                    }
                    (lat, if from != i { per_thread as u64 } else { 0 })
                })
            })
            .collect();
        for w in workers {
            let (lat, r) = w.join().expect("probe worker panicked");
            latencies.extend(lat);
            remote += r;
        }
    });

    let histogram = log2_histogram(&latencies);
    let slow = latencies.iter().filter(|&&l| l >= SLOW_FREE_NS).count() as u64;
    latencies.sort_unstable();
    let total = (per_thread * m) as u64;
    Ok(ProbeResult {
        threads: m,
        object_size: cfg.object_size,
        batch: cfg.batch,
        mode: cfg.mode,
        rounds: cfg.rounds,
        allocs: total,
        frees: latencies.len() as u64,
        remote_frees: remote,
        p50_ns: percentile(&latencies, 50.0),
        p99_ns: percentile(&latencies, 99.0),
        max_ns: latencies.last().copied().unwrap_or(0),
        slow_frees: slow,
        histogram,
    })
}

/// Writes the histogram and a one-row summary into `dir`.
pub fn emit(r: &ProbeResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let base = format!("rbf-{}-m{}-b{}", r.mode.as_str(), r.threads, r.batch);
    let hist = dir.join(format!("{base}-histogram.csv"));
    let mut w = csv::Writer::from_path(&hist)?;
    w.write_record(["upper_ns", "count"])?;
    for (upper, count) in &r.histogram {
        w.write_record([upper.to_string(), count.to_string()])?;
    }
    w.flush()?;
    let summary = dir.join(format!("{base}-summary.csv"));
    let mut w = csv::Writer::from_path(&summary)?;
    w.write_record([
        "threads", "mode", "batch", "size", "rounds", "allocs", "frees", "remote_frees", "p50_ns",
        "p99_ns", "max_ns", "over_100us",
    ])?;
    w.write_record([
        r.threads.to_string(),
        r.mode.as_str().to_string(),
        r.batch.to_string(),
        r.object_size.to_string(),
        r.rounds.to_string(),
        r.allocs.to_string(),
        r.frees.to_string(),
        r.remote_frees.to_string(),
        r.p50_ns.to_string(),
        r.p99_ns.to_string(),
        r.max_ns.to_string(),
        r.slow_frees.to_string(),
    ])?;
    w.flush()?;
    Ok(vec![hist, summary])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&v, 100.0), 100);
        assert_eq!(percentile(&[], 50.0), 0);
        assert_eq!(percentile(&[7], 1.0), 7);
    }

    #[test]
    fn histogram_buckets() {
        let h = log2_histogram(&[0, 1, 2, 3, 4, 5, 1000]);
        assert_eq!(h[0], (1, 2));
        assert_eq!(h[1], (2, 1));
        assert_eq!(h[2], (4, 2));
        assert_eq!(h[3], (8, 1));
        assert_eq!(h.last().unwrap(), &(1024, 1));
        assert_eq!(h.iter().map(|b| b.1).sum::<u64>(), 7);
    }
}
