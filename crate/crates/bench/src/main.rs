use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use smr_bench::config::{BenchConfig, Length, Mix, Pin, Reclaimer};
use smr_bench::{rbf, results, run_trial};
use smr_core::FreePolicy;
use smr_workloads::{DsKind, DEFAULT_NODE_SIZE};

/// Benchmarks for safe memory reclamation schemes.
#[derive(Parser)]
#[command(name = "smr-bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coin-flip set workload.
    Run(RunArgs),
    /// Measure per-free latency of remote batch frees.
    RbfProbe(ProbeArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "debra")]
    reclaimer: Reclaimer,
    #[arg(long = "free-policy", default_value = "batch")]
    free_policy: FreePolicy,
    #[arg(long, default_value = "bst")]
    ds: DsKind,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 20_000_000)]
    keyrange: u64,
    /// Measured phase length in seconds.
    #[arg(long, default_value_t = 5.0)]
    duration: f64,
    /// Run this many operations per thread instead of a fixed duration.
    #[arg(long)]
    ops: Option<u64>,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long = "node-size", default_value_t = DEFAULT_NODE_SIZE)]
    node_size: usize,
    /// Insert, delete and contains percentages.
    #[arg(long, default_value = "50,50,0")]
    mix: Mix,
    /// Directory for per-thread timeline traces; recording is off without it.
    #[arg(long)]
    timeline: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, default_value = "none")]
    pin: Pin,
    #[arg(long = "af-quota", default_value_t = 1)]
    af_quota: usize,
    #[arg(long = "af-highwater")]
    af_highwater: Option<usize>,
    #[arg(long = "token-kfree", default_value_t = 100)]
    token_kfree: usize,
    #[arg(long = "allocator-label")]
    allocator_label: Option<String>,
    /// Skip the prefill phase.
    #[arg(long)]
    no_prefill: bool,
    #[arg(long = "prefill-timeout", default_value_t = 60.0)]
    prefill_timeout: f64,
    /// Enable the grace-period oracle (also `SMR_DEBUG_ORACLE=1`).
    #[arg(long)]
    debug_oracle: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, default_value_t = 8)]
    threads: usize,
    #[arg(long, default_value_t = 32_768)]
    batch: usize,
    #[arg(long, default_value = "batch")]
    mode: FreePolicy,
    #[arg(long, default_value_t = DEFAULT_NODE_SIZE)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    rounds: usize,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn bench_config(a: RunArgs) -> BenchConfig {
    let d = BenchConfig::default();
    BenchConfig {
        threads: a.threads,
        keyrange: a.keyrange,
        mix: a.mix,
        length: a.ops.map_or(Length::Seconds(a.duration), Length::OpsPerThread),
        trials: a.trials,
        reclaimer: a.reclaimer,
        policy: a.free_policy,
        ds: a.ds,
        node_size: a.node_size,
        seed: a.seed,
        pin: a.pin,
        allocator_label: a.allocator_label.unwrap_or(d.allocator_label.clone()),
        af_quota: a.af_quota,
        af_high_water: a.af_highwater.unwrap_or(d.af_high_water),
        token_k_free: a.token_kfree,
        timeline: a.timeline,
        out: Some(a.out),
        prefill: !a.no_prefill,
        prefill_timeout_s: a.prefill_timeout,
        debug_oracle: a.debug_oracle || d.debug_oracle,
        ..d
    }
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let cfg = bench_config(a);
    cfg.validate()?;
    let mut all = Vec::with_capacity(cfg.trials);
    let mut violated = false;
    for t in 0..cfg.trials {
        let r = run_trial(&cfg, t)?;
        println!(
            "{} trial {}: {:.0} ops/s, peak {:.1} MiB, retired {}, freed {}, epochs {}, {:.2}% freeing",
            r.label, t, r.ops_per_sec, r.peak_mib, r.retired, r.freed, r.epochs, r.pct_time_freeing
        );
        if r.oracle_violations > 0 || r.canary_hits > 0 {
            eprintln!(
                "oracle: {} violations, {} canary hits",
                r.oracle_violations, r.canary_hits
            );
            violated = true;
        }
        all.push(r);
    }
    let out = cfg.out.as_ref().expect("out dir");
    results::emit(&all, out)?;
    println!("wrote {}", out.join(results::RESULTS_FILE).display());
    Ok(if violated { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn probe(a: ProbeArgs) -> Result<ExitCode> {
    let cfg = rbf::ProbeConfig {
        threads: a.threads,
        object_size: a.size,
        batch: a.batch,
        mode: a.mode,
        rounds: a.rounds,
    };
    let r = rbf::run(&cfg)?;
    println!(
        "{} m={} B={}: {} frees, p50 {} ns, p99 {} ns, max {} ns, {} over 100us",
        r.mode.as_str(),
        r.threads,
        r.batch,
        r.frees,
        r.p50_ns,
        r.p99_ns,
        r.max_ns,
        r.slow_frees
    );
    rbf::emit(&r, &a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::RbfProbe(a) => probe(a),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
