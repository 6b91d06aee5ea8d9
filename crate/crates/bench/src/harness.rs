//! Prefill and measured phases of one trial.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU8, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use crossbeam_utils::CachePadded;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smr_core::timeline::{self, ThreadTrace};
use smr_core::{Domain, DomainConfig, FreePolicy, GarbageSample, Recorder, Scheme, ThreadHandle};
use smr_workloads::{ConcurrentSet, DsKind};

use crate::config::{BenchConfig, Length, Mix, Reclaimer};
use crate::system::{pin_current, RssSampler};

/// Everything measured in one trial.
#[derive(Clone, Debug)]
pub struct TrialResult {
    pub label: String,
    pub trial: usize,
    pub threads: usize,
    pub reclaimer: Reclaimer,
    pub policy: FreePolicy,
    pub ds: DsKind,
    pub keyrange: u64,
    pub node_size: usize,
    pub seed: u64,
    pub allocator: String,
    pub ops: u64,
    pub elapsed_s: f64,
    pub ops_per_sec: f64,
    pub peak_mib: f64,
    pub rss_available: bool,
    pub rss_samples: usize,
    /// Retired and freed during the measured phase.
    pub retired: u64,
    pub freed: u64,
    pub epochs: u64,
    pub free_ns: u64,
    pub pct_time_freeing: f64,
    /// Lifetime totals after the final drain.
    pub retired_total: u64,
    pub freed_total: u64,
    pub prefill_size: usize,
    pub final_size: usize,
    pub timeline_events: u64,
    pub timeline_drops: u64,
    pub oracle_violations: u64,
    pub canary_hits: u64,
    /// `(thread, sample)` for every epoch start in the measured phase.
    pub garbage: Vec<(usize, GarbageSample)>,
    pub timeline_dir: Option<PathBuf>,
}

/// Generator for worker `tid` of trial `trial`.
pub fn worker_rng(seed: u64, trial: usize, tid: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((trial as u64) << 32) | tid as u64);
    rng
}

#[derive(Clone, Copy)]
enum Choice {
    Insert,
    Delete,
    Contains,
}

#[inline]
fn draw(rng: &mut ChaCha8Rng, mix: Mix, keyrange: u64) -> (Choice, u64) {
    let coin = rng.random_range(0..100u32);
    let key = rng.random_range(0..keyrange);
    let choice = if coin < mix.insert {
        Choice::Insert
    } else if coin < mix.insert + mix.delete {
        Choice::Delete
    } else {
        Choice::Contains
    };
    (choice, key)
}

/// Runs one operation and returns the change in set size.
#[inline]
fn apply<S: Scheme, R: Recorder, T: ConcurrentSet>(
    set: &T,
    h: &mut ThreadHandle<S, R>,
    choice: Choice,
    key: u64,
) -> i64 {
    h.begin_op().expect("begin_op");
    let delta = match choice {
        Choice::Insert => !set.insert(h, key) as i64,
        Choice::Delete => -(set.delete(h, key) as i64),
        Choice::Contains => {
            set.contains(h, key);
            0
        }
    };
    h.end_op().expect("end_op");
    delta
}

const MODE_FILL: u8 = 0;
const MODE_MIX: u8 = 1;

struct Shared<T> {
    set: Arc<T>,
    sizes: Vec<CachePadded<AtomicI64>>,
    mode: AtomicU8,
    prefill_done: AtomicBool,
    stop: AtomicBool,
    barrier: Barrier,
}

impl<T> Shared<T> {
    fn size(&self) -> i64 {
        self.sizes.iter().map(|s| s.load(Ordering::Acquire)).sum()
    }
}

struct WorkerOut {
    ops: u64,
    trace: ThreadTrace,
    garbage: Vec<GarbageSample>,
}

/// Operations each thread runs between two prefill size checks.
pub fn prefill_chunk(keyrange: u64, threads: usize) -> u64 {
    (keyrange / (20 * threads as u64)).clamp(256, 1 << 20)
}

/// Allowed distance from the target size: 1%, and at least one key.
pub fn prefill_tolerance(target: u64) -> u64 {
    (target / 100).max(1)
}

fn worker<S: Scheme, R: Recorder, T: ConcurrentSet>(
    cfg: &BenchConfig,
    trial: usize,
    tid: usize,
    domain: Domain<S, R>,
    sh: &Shared<T>,
) -> Result<WorkerOut> {
    pin_current(cfg.pin, tid);
    let mut h = domain.register().map_err(|e| anyhow!("register: {e}"))?;
    let mut rng = worker_rng(cfg.seed, trial, tid);
    let set = &*sh.set;
    let mut size = 0i64;
    if cfg.prefill {
        let chunk = prefill_chunk(cfg.keyrange, cfg.threads);
        let fill = Mix {
            insert: 100,
            delete: 0,
            contains: 0,
        };
        let balanced = Mix {
            insert: 50,
            delete: 50,
            contains: 0,
        };
        loop {
            sh.barrier.wait();
            if sh.prefill_done.load(Ordering::Acquire) {
                break;
            }
            let mix = if sh.mode.load(Ordering::Acquire) == MODE_FILL { fill } else { balanced };
            for _ in 0..chunk {
                let (c, k) = draw(&mut rng, mix, cfg.keyrange);
                size += apply(set, &mut h, c, k);
            }
            sh.sizes[tid].store(size, Ordering::Release);
            sh.barrier.wait();
        }
    }
    // Measured phase starts together.
    sh.barrier.wait();
    if sh.stop.load(Ordering::Acquire) {
        return Ok(WorkerOut {
            ops: 0,
            trace: h.trace(),
            garbage: Vec::new(),
        });
    }
    h.clear_trace();
    let mut ops = 0u64;
    match cfg.length {
        Length::OpsPerThread(n) => {
            for _ in 0..n {
                let (c, k) = draw(&mut rng, cfg.mix, cfg.keyrange);
                size += apply(set, &mut h, c, k);
            }
            ops = n;
        }
        Length::Seconds(_) => {
            while !sh.stop.load(Ordering::Relaxed) {
                for _ in 0..16 {
                    let (c, k) = draw(&mut rng, cfg.mix, cfg.keyrange);
                    size += apply(set, &mut h, c, k);
                }
                ops += 16;
            }
        }
    }
    sh.sizes[tid].store(size, Ordering::Release);
    let trace = h.trace();
    let garbage = h.garbage_samples();
    Ok(WorkerOut { ops, trace, garbage })
}

/// Prefill, measured phase, drain and bookkeeping for one trial.
pub fn run<S: Scheme, R: Recorder, T: ConcurrentSet + 'static>(
    cfg: &BenchConfig,
    trial: usize,
    params: S::Params,
    set: T,
) -> Result<TrialResult> {
    cfg.validate()?;
    let n = cfg.threads;
    let mut dc = DomainConfig::default()
        .with_max_threads(n)
        .with_policy(cfg.effective_policy())
        .with_debug_oracle(cfg.debug_oracle);
    dc.af_quota = cfg.af_quota;
    dc.af_high_water = cfg.af_high_water;
    dc.abort_on_violation = cfg.abort_on_violation;
    dc.timeline_capacity = cfg.timeline_capacity;
    dc.single_free_threshold_ns = Some(cfg.single_free_threshold_ns);
    dc.garbage_capacity = 1 << 20;
    let domain: Domain<S, R> = Domain::new(dc, params);

    let sh = Arc::new(Shared {
        set: Arc::new(set),
        sizes: (0..n).map(|_| CachePadded::new(AtomicI64::new(0))).collect(),
        mode: AtomicU8::new(MODE_FILL),
        prefill_done: AtomicBool::new(false),
        stop: AtomicBool::new(false),
        barrier: Barrier::new(n + 1),
    });

    let outcome = std::thread::scope(|scope| -> Result<_> {
        let workers: Vec<_> = (0..n)
            .map(|tid| {
                let (d, sh) = (domain.clone(), &sh);
                std::thread::Builder::new()
                    .name(format!("worker-{tid}"))
                    .spawn_scoped(scope, move || {
                        // A dead worker would leave the others stuck at a barrier.
                        let run = std::panic::AssertUnwindSafe(|| worker(cfg, trial, tid, d, sh));
                        std::panic::catch_unwind(run).unwrap_or_else(|_| {
                            eprintln!("worker {tid} panicked; aborting the trial");
                            std::process::exit(101)
                        })
                    })
                    .expect("spawn worker")
            })
            .collect();

        let prefill = if cfg.prefill { coordinate_prefill(cfg, &sh) } else { Ok(0) };
        let timed_out = prefill.is_err();
        if timed_out {
            sh.stop.store(true, Ordering::Release);
        }
        let rss = RssSampler::start(Duration::from_millis(cfg.rss_interval_ms));
        let before = domain.stats();
        sh.barrier.wait();
        let start = Instant::now();
        if let (Length::Seconds(s), false) = (cfg.length, timed_out) {
            std::thread::sleep(Duration::from_secs_f64(s));
            sh.stop.store(true, Ordering::Release);
        }
        let mut outs = Vec::with_capacity(n);
        let mut failure = None;
        for (tid, w) in workers.into_iter().enumerate() {
            match w.join() {
                Ok(Ok(out)) => outs.push(out),
                Ok(Err(e)) => failure = Some(e.context(format!("worker {tid}"))),
                Err(_) => failure = Some(anyhow!("worker {tid} panicked")),
            }
        }
        let elapsed = start.elapsed();
        let after = domain.stats();
        let rss = rss.stop();
        if let Some(e) = failure {
            return Err(e);
        }
        let prefill_size = prefill?;
        Ok((outs, elapsed, before, after, rss, prefill_size))
    });
    let (outs, elapsed, before, after, rss, prefill_size) = outcome?;

    domain.drain().map_err(|e| anyhow!("drain: {e}"))?;
    let total = domain.stats();
    let report = domain.oracle_report();
    let final_size = sh.set.len_quiescent();
    let expected = sh.size();
    if final_size as i64 != expected {
        bail!("set holds {final_size} keys but completed operations imply {expected}");
    }

    let ops: u64 = outs.iter().map(|o| o.ops).sum();
    let elapsed_s = elapsed.as_secs_f64();
    let free_ns = after.free_ns - before.free_ns;
    let label = cfg.label();
    let mut garbage = Vec::new();
    for (tid, o) in outs.iter().enumerate() {
        garbage.extend(o.garbage.iter().map(|g| (tid, *g)));
    }
    let traces: Vec<ThreadTrace> = outs.into_iter().map(|o| o.trace).collect();
    let timeline_events = traces.iter().map(|t| t.events.len() as u64).sum();
    let timeline_drops = traces.iter().map(|t| t.dropped).sum();
    let timeline_dir = match (&cfg.timeline, R::ENABLED) {
        (Some(root), true) => {
            let dir = root.join(&label).join(format!("trial_{trial}"));
            timeline::flush(&traces, &dir, domain.clock_origin_unix_ns(), &manifest_config(cfg, trial))
                .with_context(|| format!("writing timeline to {}", dir.display()))?;
            Some(dir)
        }
        _ => None,
    };

    Ok(TrialResult {
        label,
        trial,
        threads: n,
        reclaimer: cfg.reclaimer,
        policy: cfg.effective_policy(),
        ds: cfg.ds,
        keyrange: cfg.keyrange,
        node_size: cfg.node_size,
        seed: cfg.seed,
        allocator: cfg.allocator_label.clone(),
        ops,
        elapsed_s,
        ops_per_sec: if elapsed_s > 0.0 { ops as f64 / elapsed_s } else { 0.0 },
        peak_mib: rss.peak_mib,
        rss_available: rss.available,
        rss_samples: rss.samples,
        retired: after.retired - before.retired,
        freed: after.freed - before.freed,
        epochs: after.epochs - before.epochs,
        free_ns,
        pct_time_freeing: if elapsed_s > 0.0 {
            100.0 * free_ns as f64 / (n as f64 * elapsed.as_nanos() as f64)
        } else {
            0.0
        },
        retired_total: total.retired,
        freed_total: total.freed,
        prefill_size,
        final_size,
        timeline_events,
        timeline_drops,
        oracle_violations: report.as_ref().map_or(0, |r| r.violations),
        canary_hits: report.as_ref().map_or(0, |r| r.canary_hits),
        garbage,
        timeline_dir,
    })
}

/// Drives the prefill rounds: fill to half the key range, then run the
/// balanced mix until two consecutive checks land within tolerance.
fn coordinate_prefill<T>(cfg: &BenchConfig, sh: &Shared<T>) -> Result<usize> {
    let target = cfg.keyrange / 2;
    let tol = prefill_tolerance(target) as i64;
    let deadline = Instant::now() + Duration::from_secs_f64(cfg.prefill_timeout_s);
    let mut streak = 0;
    loop {
        sh.barrier.wait();
        sh.barrier.wait();
        let size = sh.size();
        if sh.mode.load(Ordering::Relaxed) == MODE_FILL {
            if size >= target as i64 {
                sh.mode.store(MODE_MIX, Ordering::Release);
            }
        } else if (size - target as i64).abs() <= tol {
            streak += 1;
        } else {
            streak = 0;
        }
        let timed_out = Instant::now() >= deadline;
        if streak >= 2 || timed_out {
            sh.prefill_done.store(true, Ordering::Release);
            sh.barrier.wait();
            if streak >= 2 {
                return Ok(size as usize);
            }
            bail!("prefill timeout");
        }
    }
}

fn manifest_config(cfg: &BenchConfig, trial: usize) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("reclaimer", cfg.reclaimer.to_string());
    put("policy", cfg.effective_policy().as_str().into());
    put("ds", cfg.ds.as_str().into());
    put("threads", cfg.threads.to_string());
    put("keyrange", cfg.keyrange.to_string());
    put("node_size", cfg.node_size.to_string());
    put("seed", cfg.seed.to_string());
    put("trial", trial.to_string());
    put("allocator", cfg.allocator_label.clone());
    put("mix", cfg.mix.to_string());
    put("token_k_free", cfg.token_k_free.to_string());
    put("af_quota", cfg.af_quota.to_string());
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_streams_differ_and_replay() {
        let a: Vec<u64> = (0..4).map(|_| worker_rng(7, 0, 0).random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let x: u64 = worker_rng(7, 0, 0).random();
        let y: u64 = worker_rng(7, 0, 1).random();
        let z: u64 = worker_rng(7, 1, 0).random();
        assert!(x != y && x != z);
    }

    #[test]
    fn draw_respects_mix() {
        let mut rng = worker_rng(1, 0, 0);
        let mix = Mix { insert: 20, delete: 30, contains: 50 };
        let mut counts = [0u32; 3];
        for _ in 0..100_000 {
            let (c, k) = draw(&mut rng, mix, 10);
            assert!(k < 10);
            counts[c as usize] += 1;
        }
        for (got, want) in counts.iter().zip([20_000.0, 30_000.0, 50_000.0]) {
            assert!((*got as f64 - want).abs() < want * 0.05, "{counts:?}");
        }
    }

    #[test]
    fn prefill_sizing() {
        assert_eq!(prefill_tolerance(10_000_000), 100_000);
        assert_eq!(prefill_tolerance(50), 1);
        assert_eq!(prefill_chunk(100, 1), 256);
        assert_eq!(prefill_chunk(20_000_000, 8), 125_000);
    }
}
