use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Result};
use smr_core::{FreePolicy, TokenVariant, REFERENCE_BATCH};
use smr_workloads::{DsKind, DEFAULT_NODE_SIZE};

/// Reclaimer ids accepted by `--reclaimer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reclaimer {
    None,
    Debra,
    Qsbr,
    TokenNaive,
    TokenPassFirst,
    TokenPeriodic,
    /// Periodic token passing with the amortized free policy forced on.
    TokenAf,
}

impl Reclaimer {
    pub const ALL: [Reclaimer; 7] = [
        Reclaimer::None,
        Reclaimer::Debra,
        Reclaimer::Qsbr,
        Reclaimer::TokenNaive,
        Reclaimer::TokenPassFirst,
        Reclaimer::TokenPeriodic,
        Reclaimer::TokenAf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reclaimer::None => "none",
            Reclaimer::Debra => "debra",
            Reclaimer::Qsbr => "qsbr",
            Reclaimer::TokenNaive => "token_naive",
            Reclaimer::TokenPassFirst => "token_passfirst",
            Reclaimer::TokenPeriodic => "token_periodic",
            Reclaimer::TokenAf => "token_af",
        }
    }

    pub fn token_variant(self) -> Option<TokenVariant> {
        match self {
            Reclaimer::TokenNaive => Some(TokenVariant::Naive),
            Reclaimer::TokenPassFirst => Some(TokenVariant::PassFirst),
            Reclaimer::TokenPeriodic | Reclaimer::TokenAf => Some(TokenVariant::Periodic),
            _ => None,
        }
    }

    pub fn reclaims(self) -> bool {
        self != Reclaimer::None
    }

    /// The policy actually in force for a requested one.
    pub fn effective_policy(self, requested: FreePolicy) -> FreePolicy {
        if self == Reclaimer::TokenAf {
            FreePolicy::Amortized
        } else {
            requested
        }
    }
}

impl fmt::Display for Reclaimer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reclaimer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Reclaimer::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown reclaimer `{s}`"))
    }
}

/// CPU pinning of worker threads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pin {
    #[default]
    None,
    /// Worker i on cpu i.
    Compact,
    /// Alternate between the two halves of the cpu set.
    Scatter,
}

impl Pin {
    pub fn as_str(self) -> &'static str {
        match self {
            Pin::None => "none",
            Pin::Compact => "compact",
            Pin::Scatter => "scatter",
        }
    }
}

impl FromStr for Pin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Pin::None),
            "compact" => Ok(Pin::Compact),
            "scatter" => Ok(Pin::Scatter),
            other => Err(format!("unknown pin policy `{other}`")),
        }
    }
}

/// Operation mix in percent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mix {
    pub insert: u32,
    pub delete: u32,
    pub contains: u32,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            insert: 50,
            delete: 50,
            contains: 0,
        }
    }
}

impl FromStr for Mix {
    type Err = String;

    /// `insert,delete,contains`, e.g. `50,50,0`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>().map_err(|e| format!("bad mix `{s}`: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [insert, delete, contains] => Ok(Mix {
                insert,
                delete,
                contains,
            }),
            _ => Err(format!("mix `{s}` needs three comma-separated percentages")),
        }
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.insert, self.delete, self.contains)
    }
}

/// How long the measured phase runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Length {
    Seconds(f64),
    /// Fixed operation count per thread; replayable with one thread.
    OpsPerThread(u64),
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub threads: usize,
    pub keyrange: u64,
    pub mix: Mix,
    pub length: Length,
    pub trials: usize,
    pub reclaimer: Reclaimer,
    pub policy: FreePolicy,
    pub ds: DsKind,
    pub node_size: usize,
    pub seed: u64,
    pub pin: Pin,
    pub allocator_label: String,
    pub af_quota: usize,
    pub af_high_water: usize,
    pub token_k_free: usize,
    /// Timeline root; `None` runs with the recorder stubbed out.
    pub timeline: Option<PathBuf>,
    /// Per-thread timeline capacity.
    pub timeline_capacity: usize,
    /// Free calls at least this long get a `SINGLE_FREE` event.
    pub single_free_threshold_ns: u64,
    pub out: Option<PathBuf>,
    pub prefill: bool,
    pub prefill_timeout_s: f64,
    pub debug_oracle: bool,
    /// Exit the process on the first oracle violation instead of counting.
    pub abort_on_violation: bool,
    pub rss_interval_ms: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            threads: 1,
            keyrange: 20_000_000,
            mix: Mix::default(),
            length: Length::Seconds(5.0),
            trials: 3,
            reclaimer: Reclaimer::Debra,
            policy: FreePolicy::Batch,
            ds: DsKind::Bst,
            node_size: DEFAULT_NODE_SIZE,
            seed: 1,
            pin: Pin::None,
            allocator_label: crate::allocator_label().to_string(),
            af_quota: 1,
            af_high_water: 10 * REFERENCE_BATCH,
            token_k_free: smr_core::token::DEFAULT_K_FREE,
            timeline: None,
            timeline_capacity: 100_000,
            single_free_threshold_ns: 100_000,
            out: None,
            prefill: true,
            prefill_timeout_s: 60.0,
            debug_oracle: smr_core::config::debug_oracle_from_env(),
            abort_on_violation: true,
            rss_interval_ms: 10,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        if self.keyrange < 2 {
            bail!("keyrange must be at least 2");
        }
        if self.mix.insert + self.mix.delete + self.mix.contains != 100 {
            bail!("mix {} does not sum to 100", self.mix);
        }
        match self.length {
            Length::Seconds(s) if !(s > 0.0) => bail!("duration must be positive"),
            Length::OpsPerThread(0) => bail!("ops per thread must be positive"),
            _ => {}
        }
        if self.trials == 0 {
            bail!("trials must be at least 1");
        }
        if self.af_quota == 0 {
            bail!("af quota must be at least 1");
        }
        if self.token_k_free == 0 {
            bail!("token k_free must be at least 1");
        }
        Ok(())
    }

    pub fn effective_policy(&self) -> FreePolicy {
        self.reclaimer.effective_policy(self.policy)
    }

    /// Identifies one configuration in file names and summary rows.
    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}-n{}",
            self.ds.as_str(),
            self.reclaimer,
            self.effective_policy().as_str(),
            self.threads
        )
    }
}
