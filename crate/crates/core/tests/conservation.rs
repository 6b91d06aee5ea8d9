use std::sync::Arc;
use std::sync::Barrier;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use smr_core::{
    alloc_block, Domain, DomainConfig, Ebr, FreePolicy, Leaky, NullRecorder, Qsbr, Scheme,
    TokenParams, TokenRing, TokenVariant,
};

fn config(threads: usize, policy: FreePolicy) -> DomainConfig {
    let mut c = DomainConfig::default()
        .with_max_threads(threads)
        .with_policy(policy)
        .with_debug_oracle(true);
    c.abort_on_violation = false;
    c
}

/// Each thread runs `ops` operations retiring 0..=2 objects apiece.
fn stress<S: Scheme>(threads: usize, ops: usize, policy: FreePolicy, params: S::Params) -> Domain<S, NullRecorder> {
    let d: Domain<S, NullRecorder> = Domain::new(config(threads, policy), params);
    let start = Arc::new(Barrier::new(threads));
    let workers: Vec<_> = (0..threads)
        .map(|t| {
            let (d, start) = (d.clone(), start.clone());
            std::thread::spawn(move || {
                let mut rng = rand::rngs::StdRng::seed_from_u64(t as u64);
                let mut h = d.register().unwrap();
                start.wait();
                for _ in 0..ops {
                    h.begin_op().unwrap();
                    for _ in 0..rng.random_range(0..=2) {
                        unsafe { h.retire_block(alloc_block(40), 40).unwrap() };
                    }
                    h.end_op().unwrap();
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    d.drain().unwrap();
    d
}

fn check_reclaiming<S: Scheme>(params: S::Params) {
    for policy in [FreePolicy::Batch, FreePolicy::Amortized] {
        let d = stress::<S>(4, 25_000, policy, params.clone());
        let s = d.stats();
        assert!(s.retired > 0);
        assert_eq!(s.freed, s.retired, "{} {:?}", d.name(), policy);
        let report = d.oracle_report().unwrap();
        assert!(report.clean(), "{} {:?}: {:?}", d.name(), policy, report.first_violation);
        assert_eq!(report.checked, s.retired);
    }
}

#[test]
fn debra_conserves_and_stays_safe() {
    check_reclaiming::<Ebr>(Default::default());
}

#[test]
fn qsbr_conserves_and_stays_safe() {
    check_reclaiming::<Qsbr>(());
}

#[test]
fn token_variants_conserve_and_stay_safe() {
    for variant in [TokenVariant::Naive, TokenVariant::PassFirst, TokenVariant::Periodic] {
        check_reclaiming::<TokenRing>(TokenParams { variant, k_free: 7 });
    }
}

#[test]
fn leaky_frees_nothing_under_stress() {
    let d = stress::<Leaky>(4, 2_000, FreePolicy::Batch, ());
    let s = d.stats();
    assert_eq!(s.freed, 0);
    assert_eq!(s.leaked, s.retired);
}

#[derive(Clone, Debug)]
enum Action {
    Op(u8),
    Switch,
}

fn actions() -> impl Strategy<Value = Vec<Action>> {
    prop::collection::vec(
        prop_oneof![4 => (0u8..4).prop_map(Action::Op), 1 => Just(Action::Switch)],
        1..200,
    )
}

/// Drives three unbound handles on one thread in a random order.
fn replay<S: Scheme>(plan: &[Action], policy: FreePolicy, params: S::Params) -> (u64, u64, bool) {
    let d: Domain<S, NullRecorder> = Domain::new(config(3, policy), params);
    let mut hs: Vec<_> = (0..3).map(|_| d.register_unbound().unwrap()).collect();
    let mut cur = 0;
    // Thread 2 keeps an operation open across switches to exercise blocking.
    for a in plan {
        match a {
            Action::Switch => cur = (cur + 1) % 3,
            Action::Op(n) => {
                let h = &mut hs[cur];
                if h.in_operation() {
                    h.end_op().unwrap();
                }
                h.begin_op().unwrap();
                for _ in 0..*n {
                    unsafe { h.retire_block(alloc_block(16), 16).unwrap() };
                }
                if cur != 2 {
                    h.end_op().unwrap();
                }
            }
        }
    }
    for h in hs.iter_mut() {
        if h.in_operation() {
            h.end_op().unwrap();
        }
    }
    drop(hs);
    d.drain().unwrap();
    let s = d.stats();
    (s.retired, s.freed, d.oracle_report().unwrap().clean())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interleaved_handles_are_safe_and_conserve(plan in actions(), amortized in any::<bool>()) {
        let policy = if amortized { FreePolicy::Amortized } else { FreePolicy::Batch };
        for (retired, freed, clean) in [
            replay::<Ebr>(&plan, policy, Default::default()),
            replay::<Qsbr>(&plan, policy, ()),
            replay::<TokenRing>(&plan, policy, TokenParams { variant: TokenVariant::Naive, k_free: 3 }),
            replay::<TokenRing>(&plan, policy, TokenParams { variant: TokenVariant::Periodic, k_free: 3 }),
        ] {
            prop_assert!(clean);
            prop_assert_eq!(retired, freed);
        }
    }
}
