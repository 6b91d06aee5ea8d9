//! Benchmark harness for the reclamation schemes: coin-flip set workloads
//! with prefill, RSS sampling, per-epoch garbage accounting and timeline
//! output, plus a probe for remote batch free latency.

pub mod config;
pub mod garbage;
pub mod harness;
pub mod rbf;
pub mod results;
pub mod system;

use anyhow::Result;
use smr_core::{Ebr, EbrParams, EventBuffer, Leaky, NullRecorder, Qsbr, Recorder, Scheme};
use smr_core::{TokenParams, TokenRing};
use smr_workloads::{DsKind, ExternalBst, LinkedListSet};

pub use config::{BenchConfig, Length, Mix, Pin, Reclaimer};
pub use harness::TrialResult;

#[cfg(feature = "jemalloc")]
#[global_allocator]
static GLOBAL: tikv_jemallocator::Jemalloc = tikv_jemallocator::Jemalloc;

/// Name of the allocator linked into this build.
pub fn allocator_label() -> &'static str {
    if cfg!(feature = "jemalloc") {
        "jemalloc"
    } else {
        "system"
    }
}

/// Whether the active allocator keeps per-thread caches of freed objects.
/// Both jemalloc and glibc malloc do.
pub fn allocator_has_thread_cache() -> bool {
    cfg!(feature = "jemalloc") || cfg!(all(target_os = "linux", target_env = "gnu"))
}

/// Runs trial `trial` of `cfg`. The recorder is live only when a timeline
/// directory is configured.
pub fn run_trial(cfg: &BenchConfig, trial: usize) -> Result<TrialResult> {
    if cfg.timeline.is_some() {
        with_recorder::<EventBuffer>(cfg, trial)
    } else {
        with_recorder::<NullRecorder>(cfg, trial)
    }
}

/// Same as [`run_trial`] with the recorder chosen by the caller.
pub fn run_trial_recording(cfg: &BenchConfig, trial: usize, record: bool) -> Result<TrialResult> {
    if record {
        with_recorder::<EventBuffer>(cfg, trial)
    } else {
        with_recorder::<NullRecorder>(cfg, trial)
    }
}

/// Runs every trial of `cfg` in order.
pub fn run_trials(cfg: &BenchConfig) -> Result<Vec<TrialResult>> {
    (0..cfg.trials).map(|t| run_trial(cfg, t)).collect()
}

fn with_recorder<R: Recorder>(cfg: &BenchConfig, trial: usize) -> Result<TrialResult> {
    match cfg.reclaimer {
        Reclaimer::None => with_scheme::<Leaky, R>(cfg, trial, ()),
        Reclaimer::Debra => with_scheme::<Ebr, R>(cfg, trial, EbrParams::default()),
        Reclaimer::Qsbr => with_scheme::<Qsbr, R>(cfg, trial, ()),
        r => {
            let params = TokenParams {
                variant: r.token_variant().expect("token reclaimer"),
                k_free: cfg.token_k_free,
            };
            with_scheme::<TokenRing, R>(cfg, trial, params)
        }
    }
}

fn with_scheme<S: Scheme, R: Recorder>(cfg: &BenchConfig, trial: usize, params: S::Params) -> Result<TrialResult> {
    match cfg.ds {
        DsKind::Bst => harness::run::<S, R, _>(cfg, trial, params, ExternalBst::new(cfg.node_size)?),
        DsKind::List => harness::run::<S, R, _>(cfg, trial, params, LinkedListSet::new(cfg.node_size)?),
    }
}
