//! Per-thread interval recording for post-hoc timeline graphs.
//!
//! Each registered thread owns one [`Recorder`]. Recording is a bounds check
//! and a store into a preallocated buffer; nothing is written to disk until
//! [`flush`] runs after every thread has quiesced.
//!
//! On disk a trace is a directory holding one `thread_<id>.csv` per thread
//! (`kind,start_ns,end_ns,value`, in record order) and a `manifest.txt` of
//! `key=value` lines.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    BatchFree,
    SingleFree,
    EpochAdvance,
    TokenPass,
    GarbageCount,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::BatchFree,
        EventKind::SingleFree,
        EventKind::EpochAdvance,
        EventKind::TokenPass,
        EventKind::GarbageCount,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::BatchFree => "BATCH_FREE",
            EventKind::SingleFree => "SINGLE_FREE",
            EventKind::EpochAdvance => "EPOCH_ADVANCE",
            EventKind::TokenPass => "TOKEN_PASS",
            EventKind::GarbageCount => "GARBAGE_COUNT",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event kind `{s}`"))
    }
}

/// One timed interval, or an instant when `start_ns == end_ns`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimelineEvent {
    pub kind: EventKind,
    pub start_ns: u64,
    pub end_ns: u64,
    pub value: u64,
}

impl TimelineEvent {
    pub fn interval(kind: EventKind, start_ns: u64, end_ns: u64, value: u64) -> Self {
        debug_assert!(start_ns <= end_ns);
        TimelineEvent {
            kind,
            start_ns,
            end_ns,
            value,
        }
    }

    pub fn instant(kind: EventKind, at_ns: u64, value: u64) -> Self {
        Self::interval(kind, at_ns, at_ns, value)
    }

    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OverflowPolicy {
    /// Keep the oldest events and count the rest as dropped.
    #[default]
    DropNewest,
    /// Keep the newest events, overwriting the oldest.
    Overwrite,
}

/// Sink for a thread's timeline events.
pub trait Recorder: Send + 'static {
    /// False for stubs; lets callers skip clock reads entirely.
    const ENABLED: bool;

    fn with_capacity(capacity: usize, overflow: OverflowPolicy) -> Self;

    fn record(&mut self, event: TimelineEvent);

    fn clear(&mut self);

    /// Retained events, oldest first.
    fn events(&self) -> Vec<TimelineEvent>;

    fn dropped(&self) -> u64;

    fn attempted(&self) -> u64;
}

/// Fixed-capacity event buffer. Never reallocates after construction.
#[derive(Debug)]
pub struct EventBuffer {
    events: Vec<TimelineEvent>,
    capacity: usize,
    overflow: OverflowPolicy,
    // Next slot to overwrite once full (Overwrite policy only).
    head: usize,
    dropped: u64,
    attempted: u64,
}

impl EventBuffer {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

impl Recorder for EventBuffer {
    const ENABLED: bool = true;

    fn with_capacity(capacity: usize, overflow: OverflowPolicy) -> Self {
        EventBuffer {
            events: Vec::with_capacity(capacity),
            capacity,
            overflow,
            head: 0,
            dropped: 0,
            attempted: 0,
        }
    }

    #[inline]
    fn record(&mut self, event: TimelineEvent) {
        self.attempted += 1;
        if self.events.len() < self.capacity {
            self.events.push(event);
            return;
        }
        self.dropped += 1;
        if self.overflow == OverflowPolicy::Overwrite && self.capacity > 0 {
            self.events[self.head] = event;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    fn clear(&mut self) {
        self.events.clear();
        self.head = 0;
        self.dropped = 0;
        self.attempted = 0;
    }

    fn events(&self) -> Vec<TimelineEvent> {
        let mut out = Vec::with_capacity(self.events.len());
        out.extend_from_slice(&self.events[self.head..]);
        out.extend_from_slice(&self.events[..self.head]);
        out
    }

    fn dropped(&self) -> u64 {
        self.dropped
    }

    fn attempted(&self) -> u64 {
        self.attempted
    }
}

/// Recorder stub: every call compiles to nothing.
#[derive(Debug, Default)]
pub struct NullRecorder;

impl Recorder for NullRecorder {
    const ENABLED: bool = false;

    fn with_capacity(_: usize, _: OverflowPolicy) -> Self {
        NullRecorder
    }

    #[inline(always)]
    fn record(&mut self, _: TimelineEvent) {}

    fn clear(&mut self) {}

    fn events(&self) -> Vec<TimelineEvent> {
        Vec::new()
    }

    fn dropped(&self) -> u64 {
        0
    }

    fn attempted(&self) -> u64 {
        0
    }
}

/// Events collected from one thread slot after quiescence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ThreadTrace {
    pub thread_id: usize,
    pub events: Vec<TimelineEvent>,
    pub dropped: u64,
}

/// Run-level metadata written next to the per-thread files.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub thread_count: usize,
    /// Unix time (ns) at which the domain clock read zero.
    pub clock_origin_unix_ns: u64,
    pub drops: Vec<u64>,
    /// Run configuration, written as `config.<key>=<value>`.
    pub config: BTreeMap<String, String>,
    /// Unix time of the flush; the only field that varies between identical flushes.
    pub flush_unix_ns: u64,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CSV_HEADER: &str = "kind,start_ns,end_ns,value";

pub fn thread_file_name(thread_id: usize) -> String {
    format!("thread_{thread_id}.csv")
}

/// Writes one CSV per trace plus the manifest into `dir`.
///
/// The manifest is written last and atomically, so a failed flush never
/// leaves a manifest behind.
pub fn flush(
    traces: &[ThreadTrace],
    dir: &Path,
    clock_origin_unix_ns: u64,
    config: &BTreeMap<String, String>,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(traces.len() + 1);
    for trace in traces {
        let path = dir.join(thread_file_name(trace.thread_id));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(CSV_HEADER.split(','))?;
        for e in &trace.events {
            w.write_record(&[
                e.kind.as_str().to_string(),
                e.start_ns.to_string(),
                e.end_ns.to_string(),
                e.value.to_string(),
            ])?;
        }
        w.flush()?;
        written.push(path);
    }
    let manifest = Manifest {
        thread_count: traces.len(),
        clock_origin_unix_ns,
        drops: traces.iter().map(|t| t.dropped).collect(),
        config: config.clone(),
        flush_unix_ns: unix_now_ns(),
    };
    written.push(write_manifest(dir, &manifest)?);
    Ok(written)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> io::Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
    {
        let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
        writeln!(f, "thread_count={}", manifest.thread_count)?;
        writeln!(f, "clock_origin_unix_ns={}", manifest.clock_origin_unix_ns)?;
        for (i, d) in manifest.drops.iter().enumerate() {
            writeln!(f, "drops.thread_{i}={d}")?;
        }
        for (k, v) in &manifest.config {
            writeln!(f, "config.{k}={v}")?;
        }
        writeln!(f, "flush_unix_ns={}", manifest.flush_unix_ns)?;
        f.flush()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(path)
}

fn bad_data(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn read_manifest(dir: &Path) -> io::Result<Manifest> {
    let f = io::BufReader::new(fs::File::open(dir.join(MANIFEST_FILE))?);
    let mut m = Manifest::default();
    let mut drops = BTreeMap::new();
    for line in f.lines() {
        let line = line?;
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let num = || value.parse::<u64>().map_err(|e| bad_data(format!("{key}: {e}")));
        match key {
            "thread_count" => m.thread_count = num()? as usize,
            "clock_origin_unix_ns" => m.clock_origin_unix_ns = num()?,
            "flush_unix_ns" => m.flush_unix_ns = num()?,
            _ => {
                if let Some(idx) = key.strip_prefix("drops.thread_") {
                    let idx: usize = idx.parse().map_err(|_| bad_data(key))?;
                    drops.insert(idx, num()?);
                } else if let Some(k) = key.strip_prefix("config.") {
                    m.config.insert(k.to_string(), value.to_string());
                }
            }
        }
    }
    m.drops = drops.into_values().collect();
    Ok(m)
}

pub fn read_thread_csv(path: &Path) -> io::Result<Vec<TimelineEvent>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut events = Vec::new();
    for row in r.records() {
        let row = row?;
        if row.len() != 4 {
            return Err(bad_data(format!("expected 4 fields, got {}", row.len())));
        }
        let num = |i: usize| row[i].parse::<u64>().map_err(|e| bad_data(e.to_string()));
        events.push(TimelineEvent {
            kind: row[0].parse().map_err(bad_data)?,
            start_ns: num(1)?,
            end_ns: num(2)?,
            value: num(3)?,
        });
    }
    Ok(events)
}

/// Reads back every thread file listed by the manifest in `dir`.
pub fn read_traces(dir: &Path) -> io::Result<(Manifest, Vec<ThreadTrace>)> {
    let manifest = read_manifest(dir)?;
    let mut traces = Vec::with_capacity(manifest.thread_count);
    for id in 0..manifest.thread_count {
        traces.push(ThreadTrace {
            thread_id: id,
            events: read_thread_csv(&dir.join(thread_file_name(id)))?,
            dropped: manifest.drops.get(id).copied().unwrap_or(0),
        });
    }
    Ok((manifest, traces))
}

/// Keeps events lasting at least `min_duration_ns`, in order.
pub fn filter_min_duration(events: &[TimelineEvent], min_duration_ns: u64) -> Vec<TimelineEvent> {
    events
        .iter()
        .filter(|e| e.duration_ns() >= min_duration_ns)
        .copied()
        .collect()
}

pub(crate) fn unix_now_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Exp};

    fn ev(start: u64, end: u64, value: u64) -> TimelineEvent {
        TimelineEvent::interval(EventKind::BatchFree, start, end, value)
    }

    #[test]
    fn record_stores_verbatim() {
        let mut b = EventBuffer::with_capacity(4, OverflowPolicy::DropNewest);
        b.record(ev(10, 20, 5));
        assert_eq!(b.events(), vec![ev(10, 20, 5)]);
        assert_eq!(b.dropped(), 0);
    }

    #[test]
    fn full_buffer_drops_newest() {
        let cap = 100_000;
        let mut b = EventBuffer::with_capacity(cap, OverflowPolicy::DropNewest);
        for i in 0..cap as u64 {
            b.record(ev(i, i, i));
        }
        let before = b.events();
        b.record(ev(7, 8, 9));
        assert_eq!(b.dropped(), 1);
        assert_eq!(b.events(), before);
        assert_eq!(b.capacity(), cap);
        assert_eq!(b.len() as u64 + b.dropped(), b.attempted());
    }

    #[test]
    fn overwrite_keeps_newest_in_order() {
        let mut b = EventBuffer::with_capacity(3, OverflowPolicy::Overwrite);
        for i in 0..5 {
            b.record(ev(i, i, i));
        }
        let kept: Vec<u64> = b.events().iter().map(|e| e.value).collect();
        assert_eq!(kept, vec![2, 3, 4]);
        assert_eq!(b.dropped(), 2);
    }

    #[test]
    fn buffer_never_reallocates() {
        let mut b = EventBuffer::with_capacity(16, OverflowPolicy::DropNewest);
        let base = b.events.as_ptr();
        for i in 0..100 {
            b.record(ev(i, i, i));
        }
        assert_eq!(base, b.events.as_ptr());
    }

    #[test]
    fn flush_empty_writes_headers_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let traces = vec![ThreadTrace::default(), ThreadTrace { thread_id: 1, ..Default::default() }];
        flush(&traces, dir.path(), 0, &BTreeMap::new()).unwrap();
        for id in 0..2 {
            let text = fs::read_to_string(dir.path().join(thread_file_name(id))).unwrap();
            assert_eq!(text.trim_end(), CSV_HEADER);
        }
        assert_eq!(read_manifest(dir.path()).unwrap().thread_count, 2);
    }

    #[test]
    fn flush_three_threads_two_rows_each() {
        let dir = tempfile::tempdir().unwrap();
        let traces: Vec<ThreadTrace> = (0..3)
            .map(|t| ThreadTrace {
                thread_id: t,
                events: vec![ev(1, 2, t as u64), TimelineEvent::instant(EventKind::EpochAdvance, 5, 9)],
                dropped: 0,
            })
            .collect();
        flush(&traces, dir.path(), 0, &BTreeMap::new()).unwrap();
        for t in 0..3 {
            let rows = read_thread_csv(&dir.path().join(thread_file_name(t))).unwrap();
            assert_eq!(rows.len(), 2);
        }
        assert_eq!(read_manifest(dir.path()).unwrap().thread_count, 3);
    }

    #[test]
    fn flush_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let traces: Vec<ThreadTrace> = (0..4)
            .map(|t| {
                let events = (0..500)
                    .map(|_| {
                        let kind = EventKind::ALL[rng.random_range(0..5)];
                        let start = rng.random::<u32>() as u64;
                        TimelineEvent::interval(kind, start, start + rng.random::<u16>() as u64, rng.random())
                    })
                    .collect();
                ThreadTrace { thread_id: t, events, dropped: t as u64 }
            })
            .collect();
        let mut cfg = BTreeMap::new();
        cfg.insert("reclaimer".into(), "token_af".into());
        flush(&traces, dir.path(), 1234, &cfg).unwrap();
        let (manifest, back) = read_traces(dir.path()).unwrap();
        assert_eq!(back, traces);
        assert_eq!(manifest.clock_origin_unix_ns, 1234);
        assert_eq!(manifest.config, cfg);
        assert_eq!(manifest.drops, vec![0, 1, 2, 3]);
    }

    #[test]
    fn flush_is_byte_stable_except_timestamp() {
        let traces = vec![ThreadTrace { thread_id: 0, events: vec![ev(1, 5, 2)], dropped: 0 }];
        let strip = |dir: &Path| {
            let m = fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
            let m: Vec<_> = m.lines().filter(|l| !l.starts_with("flush_unix_ns=")).map(String::from).collect();
            (fs::read(dir.join(thread_file_name(0))).unwrap(), m)
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        flush(&traces, a.path(), 9, &BTreeMap::new()).unwrap();
        flush(&traces, b.path(), 9, &BTreeMap::new()).unwrap();
        assert_eq!(strip(a.path()), strip(b.path()));
    }

    #[test]
    fn unwritable_path_leaves_no_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let target = blocker.join("timeline");
        let traces = vec![ThreadTrace::default()];
        assert!(flush(&traces, &target, 0, &BTreeMap::new()).is_err());
        assert!(!target.join(MANIFEST_FILE).exists());
    }

    #[test]
    fn threshold_zero_is_identity() {
        let events = vec![ev(0, 10, 1), ev(5, 5, 2)];
        assert_eq!(filter_min_duration(&events, 0), events);
    }

    #[test]
    fn threshold_keeps_long_events() {
        let events = vec![ev(0, 50_000, 1), ev(0, 150_000, 2)];
        assert_eq!(filter_min_duration(&events, 100_000), vec![ev(0, 150_000, 2)]);
    }

    #[test]
    fn p99_threshold_keeps_one_percent() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(99);
        let exp = Exp::new(1.0 / 20_000.0).unwrap();
        let events: Vec<_> = (0..100_000)
            .map(|_| {
                let d: f64 = exp.sample(&mut rng);
                ev(0, d as u64, 0)
            })
            .collect();
        let mut durations: Vec<u64> = events.iter().map(|e| e.duration_ns()).collect();
        durations.sort_unstable();
        let p99 = durations[(durations.len() * 99) / 100];
        let kept = filter_min_duration(&events, p99).len() as f64 / events.len() as f64;
        assert!((kept - 0.01).abs() <= 0.005, "kept fraction {kept}");
    }

    #[test]
    fn null_recorder_records_nothing() {
        let mut n = NullRecorder::with_capacity(10, OverflowPolicy::DropNewest);
        n.record(ev(1, 2, 3));
        assert!(n.events().is_empty());
        assert_eq!(n.attempted(), 0);
    }
}
