//! CSV output: one row per trial, one summary row per configuration, and
//! the raw garbage samples of each trial.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::garbage::epoch_series;
use crate::harness::TrialResult;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const GARBAGE_DIR: &str = "garbage";

/// Leading columns of `results.csv`; extra columns follow.
pub const RESULT_COLUMNS: [&str; 8] = [
    "threads",
    "reclaimer",
    "policy",
    "ops_per_sec",
    "peak_mib",
    "retired",
    "freed",
    "epochs",
];

const EXTRA_COLUMNS: [&str; 22] = [
    "ds",
    "trial",
    "label",
    "seed",
    "keyrange",
    "node_size",
    "allocator",
    "elapsed_s",
    "ops",
    "pct_time_freeing",
    "free_ns",
    "retired_total",
    "freed_total",
    "prefill_size",
    "final_size",
    "timeline_events",
    "timeline_drops",
    "garbage_samples",
    "rss_ok",
    "rss_samples",
    "oracle_violations",
    "canary_hits",
];

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn result_row(r: &TrialResult) -> Vec<String> {
    vec![
        r.threads.to_string(),
        r.reclaimer.to_string(),
        r.policy.as_str().to_string(),
        f3(r.ops_per_sec),
        f3(r.peak_mib),
        r.retired.to_string(),
        r.freed.to_string(),
        r.epochs.to_string(),
        r.ds.as_str().to_string(),
        r.trial.to_string(),
        r.label.clone(),
        r.seed.to_string(),
        r.keyrange.to_string(),
        r.node_size.to_string(),
        r.allocator.clone(),
        format!("{:.6}", r.elapsed_s),
        r.ops.to_string(),
        f3(r.pct_time_freeing),
        r.free_ns.to_string(),
        r.retired_total.to_string(),
        r.freed_total.to_string(),
        r.prefill_size.to_string(),
        r.final_size.to_string(),
        r.timeline_events.to_string(),
        r.timeline_drops.to_string(),
        r.garbage.len().to_string(),
        (r.rss_available as u8).to_string(),
        r.rss_samples.to_string(),
        r.oracle_violations.to_string(),
        r.canary_hits.to_string(),
    ]
}

/// Mean, minimum and maximum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Option<Spread> {
        let xs: Vec<f64> = xs.into_iter().collect();
        if xs.is_empty() {
            return None;
        }
        Some(Spread {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

const SUMMARY_COLUMNS: [&str; 18] = [
    "label",
    "ds",
    "threads",
    "reclaimer",
    "policy",
    "trials",
    "ops_per_sec_mean",
    "ops_per_sec_min",
    "ops_per_sec_max",
    "peak_mib_mean",
    "peak_mib_min",
    "peak_mib_max",
    "retired_mean",
    "freed_mean",
    "epochs_mean",
    "pct_time_freeing_mean",
    "pct_time_freeing_min",
    "pct_time_freeing_max",
];

/// One row per label, in first-seen order.
fn summary_rows(results: &[TrialResult]) -> Vec<Vec<String>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&TrialResult>> = BTreeMap::new();
    for r in results {
        if !groups.contains_key(r.label.as_str()) {
            order.push(&r.label);
        }
        groups.entry(&r.label).or_default().push(r);
    }
    order
        .into_iter()
        .map(|label| {
            let g = &groups[label];
            let spread = |f: fn(&TrialResult) -> f64| Spread::of(g.iter().map(|r| f(r))).unwrap();
            let (tput, rss, pct) = (
                spread(|r| r.ops_per_sec),
                spread(|r| r.peak_mib),
                spread(|r| r.pct_time_freeing),
            );
            let first = g[0];
            vec![
                label.to_string(),
                first.ds.as_str().to_string(),
                first.threads.to_string(),
                first.reclaimer.to_string(),
                first.policy.as_str().to_string(),
                g.len().to_string(),
                f3(tput.mean),
                f3(tput.min),
                f3(tput.max),
                f3(rss.mean),
                f3(rss.min),
                f3(rss.max),
                f3(spread(|r| r.retired as f64).mean),
                f3(spread(|r| r.freed as f64).mean),
                f3(spread(|r| r.epochs as f64).mean),
                f3(pct.mean),
                f3(pct.min),
                f3(pct.max),
            ]
        })
        .collect()
}

/// Writes a CSV next to `path` and renames it into place.
fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)
            .with_context(|| format!("creating {}", tmp.display()))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes `results.csv`, `summary.csv` and the garbage files into `dir`.
/// The summary is written last, so a failure never leaves one behind.
pub fn emit(results: &[TrialResult], dir: &Path) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        bail!("no trials to emit");
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();

    let garbage_dir = dir.join(GARBAGE_DIR);
    fs::create_dir_all(&garbage_dir)?;
    for r in results {
        let base = format!("{}-trial{}", r.label, r.trial);
        let samples: Vec<Vec<String>> = r
            .garbage
            .iter()
            .map(|(tid, g)| vec![tid.to_string(), g.epoch.to_string(), g.garbage.to_string(), g.at_ns.to_string()])
            .collect();
        let path = garbage_dir.join(format!("{base}.csv"));
        write_csv(&path, &["thread", "epoch", "garbage", "at_ns"], &samples)?;
        written.push(path);
        let series: Vec<Vec<String>> = epoch_series(&r.garbage)
            .into_iter()
            .map(|e| vec![e.epoch.to_string(), e.garbage.to_string(), e.threads.to_string()])
            .collect();
        let path = garbage_dir.join(format!("{base}-epochs.csv"));
        write_csv(&path, &["epoch", "garbage", "threads"], &series)?;
        written.push(path);
    }

    let header: Vec<&str> = RESULT_COLUMNS.iter().chain(EXTRA_COLUMNS.iter()).copied().collect();
    let rows: Vec<Vec<String>> = results.iter().map(result_row).collect();
    let path = dir.join(RESULTS_FILE);
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let path = dir.join(SUMMARY_FILE);
    write_csv(&path, &SUMMARY_COLUMNS, &summary_rows(results))?;
    written.push(path);
    Ok(written)
}
