//! Own binary so no other test shares the process resident set.

use smr_bench::config::{BenchConfig, Length, Reclaimer};
use smr_bench::run_trial;
use smr_core::FreePolicy;

#[test]
fn leaky_peak_exceeds_amortized_token() {
    let cfg = |reclaimer| BenchConfig {
        threads: 2,
        keyrange: 20_000,
        length: Length::OpsPerThread(200_000),
        trials: 1,
        reclaimer,
        policy: FreePolicy::Amortized,
        seed: 9,
        debug_oracle: false,
        ..BenchConfig::default()
    };
    // The bounded run goes first: the allocator keeps pages, so peaks only grow.
    let af = run_trial(&cfg(Reclaimer::TokenAf), 0).unwrap();
    let leaky = run_trial(&cfg(Reclaimer::None), 0).unwrap();
    assert!(leaky.peak_mib > af.peak_mib, "leaky {} vs token_af {}", leaky.peak_mib, af.peak_mib);
}
