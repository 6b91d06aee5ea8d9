use crate::timeline::OverflowPolicy;

/// Environment variable that switches oracle mode on (`SMR_DEBUG_ORACLE=1`).
pub const DEBUG_ORACLE_ENV: &str = "SMR_DEBUG_ORACLE";

/// Batch size used by the amortized-free high-water default.
pub const REFERENCE_BATCH: usize = 32 * 1024;

/// Where a batch goes once its grace period has elapsed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FreePolicy {
    /// Deallocate the whole batch immediately.
    Batch,
    /// Queue the batch on the thread's freeable list and release a few objects per operation.
    Amortized,
}

impl FreePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            FreePolicy::Batch => "batch",
            FreePolicy::Amortized => "amortized",
        }
    }
}

impl std::str::FromStr for FreePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(FreePolicy::Batch),
            "amortized" => Ok(FreePolicy::Amortized),
            other => Err(format!("unknown free policy `{other}`")),
        }
    }
}

/// Per-domain configuration shared by every scheme.
#[derive(Clone, Debug)]
pub struct DomainConfig {
    /// Capacity of the registration table.
    pub max_threads: usize,
    pub policy: FreePolicy,
    /// Objects deallocated per `begin_op` under [`FreePolicy::Amortized`].
    pub af_quota: usize,
    /// Freeable-list length above which the per-op quota doubles.
    pub af_high_water: usize,
    /// Grace-period oracle, canary poisoning and quarantine.
    pub debug_oracle: bool,
    /// In oracle mode, print the violation and exit with status 2 instead of counting it.
    pub abort_on_violation: bool,
    /// Timeline events kept per thread.
    pub timeline_capacity: usize,
    pub timeline_overflow: OverflowPolicy,
    /// Record a `SINGLE_FREE` event for every deallocation at least this long.
    pub single_free_threshold_ns: Option<u64>,
    /// Epoch-start garbage samples kept per thread.
    pub garbage_capacity: usize,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            max_threads: 64,
            policy: FreePolicy::Batch,
            af_quota: 1,
            af_high_water: 10 * REFERENCE_BATCH,
            debug_oracle: debug_oracle_from_env(),
            abort_on_violation: true,
            timeline_capacity: 100_000,
            timeline_overflow: OverflowPolicy::DropNewest,
            single_free_threshold_ns: None,
            garbage_capacity: 1 << 16,
        }
    }
}

impl DomainConfig {
    pub fn with_policy(mut self, policy: FreePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_max_threads(mut self, max_threads: usize) -> Self {
        self.max_threads = max_threads;
        self
    }

    pub fn with_debug_oracle(mut self, on: bool) -> Self {
        self.debug_oracle = on;
        self
    }
}

/// Reads [`DEBUG_ORACLE_ENV`].
pub fn debug_oracle_from_env() -> bool {
    std::env::var(DEBUG_ORACLE_ENV).is_ok_and(|v| v == "1")
}
