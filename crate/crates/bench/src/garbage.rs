//! Per-epoch garbage series built from the samples each thread takes when
//! it starts a new epoch.

use std::collections::BTreeMap;

use smr_core::GarbageSample;

/// Garbage summed over the threads that reported a given epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochGarbage {
    pub epoch: u64,
    pub garbage: u64,
    /// Threads that contributed a sample.
    pub threads: usize,
}

/// Folds `(thread, sample)` pairs into one row per epoch, ascending.
/// A thread that starts the same epoch twice contributes its last sample.
pub fn epoch_series(samples: &[(usize, GarbageSample)]) -> Vec<EpochGarbage> {
    let mut per: BTreeMap<u64, BTreeMap<usize, u64>> = BTreeMap::new();
    for &(tid, s) in samples {
        per.entry(s.epoch).or_default().insert(tid, s.garbage);
    }
    per.into_iter()
        .map(|(epoch, by_thread)| EpochGarbage {
            epoch,
            garbage: by_thread.values().sum(),
            threads: by_thread.len(),
        })
        .collect()
}

/// Shape of a garbage series over its complete epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PileUp {
    pub epochs: usize,
    pub median: f64,
    pub last: u64,
    pub max: u64,
}

impl PileUp {
    /// Last complete epoch over the median epoch; infinite when the median is 0
    /// and the last epoch is not.
    pub fn last_over_median(&self) -> f64 {
        ratio(self.last as f64, self.median)
    }

    pub fn max_over_median(&self) -> f64 {
        ratio(self.max as f64, self.median)
    }
}

fn ratio(x: f64, median: f64) -> f64 {
    if median > 0.0 {
        x / median
    } else if x > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Summarizes the epochs every one of `threads` reported. `None` when there
/// are none.
pub fn pile_up(series: &[EpochGarbage], threads: usize) -> Option<PileUp> {
    let complete: Vec<u64> = series
        .iter()
        .filter(|e| e.threads >= threads)
        .map(|e| e.garbage)
        .collect();
    let last = *complete.last()?;
    let mut sorted = complete.clone();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    Some(PileUp {
        epochs: n,
        median,
        last,
        max: sorted[n - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(epoch: u64, garbage: u64) -> GarbageSample {
        GarbageSample {
            epoch,
            garbage,
            at_ns: 0,
        }
    }

    #[test]
    fn series_sums_threads_per_epoch() {
        let samples = [(0, s(1, 3)), (1, s(1, 4)), (0, s(2, 5)), (1, s(3, 1))];
        let series = epoch_series(&samples);
        assert_eq!(
            series,
            vec![
                EpochGarbage { epoch: 1, garbage: 7, threads: 2 },
                EpochGarbage { epoch: 2, garbage: 5, threads: 1 },
                EpochGarbage { epoch: 3, garbage: 1, threads: 1 },
            ]
        );
    }

    #[test]
    fn repeated_epoch_keeps_last_sample() {
        let series = epoch_series(&[(0, s(4, 10)), (0, s(4, 2))]);
        assert_eq!(series[0].garbage, 2);
    }

    #[test]
    fn pile_up_uses_complete_epochs_only() {
        let series: Vec<_> = [(1, 10, 2), (2, 10, 2), (3, 20, 2), (4, 500, 1)]
            .into_iter()
            .map(|(epoch, garbage, threads)| EpochGarbage { epoch, garbage, threads })
            .collect();
        let p = pile_up(&series, 2).unwrap();
        assert_eq!(p.epochs, 3);
        assert_eq!(p.median, 10.0);
        assert_eq!(p.last, 20);
        assert_eq!(p.last_over_median(), 2.0);
        assert!(pile_up(&series, 3).is_none());
    }

    #[test]
    fn growing_series_has_large_ratio() {
        let series: Vec<_> = (1..=21)
            .map(|e| EpochGarbage { epoch: e, garbage: e * e, threads: 1 })
            .collect();
        let p = pile_up(&series, 1).unwrap();
        assert_eq!(p.median, 121.0);
        assert!(p.last_over_median() > 3.0);
        assert_eq!(p.max, p.last);
    }

    #[test]
    fn zero_median_ratios() {
        let p = PileUp { epochs: 3, median: 0.0, last: 0, max: 4 };
        assert_eq!(p.last_over_median(), 1.0);
        assert!(p.max_over_median().is_infinite());
    }
}
