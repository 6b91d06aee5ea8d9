use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use smr_core::{
    alloc_block, free_block, DeallocTag, Domain, DomainConfig, Ebr, FreePolicy, Leaky,
    NullRecorder, Qsbr, RetiredObject, SmrError, TokenParams, TokenRing, TokenVariant,
};

fn cfg(max: usize) -> DomainConfig {
    DomainConfig::default().with_max_threads(max).with_debug_oracle(false)
}

fn obj() -> RetiredObject {
    unsafe { RetiredObject::new(alloc_block(24), 24, DeallocTag::HEAP) }
}

#[test]
fn first_registration_is_slot_zero() {
    let d: Domain<Ebr> = Domain::with_config(cfg(4));
    let h = d.register().unwrap();
    assert_eq!(h.tid(), 0);
    assert_eq!(h.op_counter(), 0);
    assert!(!h.in_operation());
}

#[test]
fn two_threads_get_dense_ids() {
    let d: Domain<Qsbr> = Domain::with_config(cfg(4));
    let ids: Vec<usize> = (0..2)
        .map(|_| {
            let d = d.clone();
            std::thread::spawn(move || {
                let mut h = d.register().unwrap();
                let id = h.tid();
                assert_eq!(h.held(), 0);
                std::mem::forget(h);
                id
            })
            .join()
            .unwrap()
        })
        .collect();
    let set: HashSet<usize> = ids.into_iter().collect();
    assert_eq!(set, HashSet::from([0, 1]));
}

#[test]
fn capacity_is_enforced() {
    let d: Domain<TokenRing> = Domain::with_config(cfg(2));
    let _a = d.register_unbound().unwrap();
    let _b = d.register_unbound().unwrap();
    assert_eq!(d.register_unbound().unwrap_err(), SmrError::RingFull);
    assert_eq!(SmrError::RingFull.to_string(), "ring full");
}

#[test]
fn double_registration_on_one_thread_fails() {
    let d: Domain<Ebr> = Domain::with_config(cfg(4));
    let h = d.register().unwrap();
    assert_eq!(d.register().unwrap_err(), SmrError::AlreadyRegistered);
    assert_eq!(SmrError::AlreadyRegistered.to_string(), "already registered");
    drop(h);
    assert!(d.register().is_ok());
}

#[test]
fn slots_are_reused_lowest_first() {
    let d: Domain<Ebr> = Domain::with_config(cfg(4));
    let a = d.register_unbound().unwrap();
    let b = d.register_unbound().unwrap();
    assert_eq!(b.tid(), 1);
    drop(a);
    assert_eq!(d.register_unbound().unwrap().tid(), 0);
}

#[test]
fn operation_bracketing_errors() {
    let d: Domain<Ebr> = Domain::with_config(cfg(2));
    let mut h = d.register().unwrap();
    assert_eq!(h.end_op().unwrap_err(), SmrError::NoOpenOperation);
    let x = obj();
    let p = x.ptr();
    assert_eq!(h.retire(x).unwrap_err(), SmrError::NotInOperation);
    unsafe { free_block(p, 24) };
    h.begin_op().unwrap();
    assert_eq!(h.op_counter(), 1);
    assert_eq!(h.begin_op().unwrap_err(), SmrError::OperationOpen);
    h.end_op().unwrap();
    assert_eq!(SmrError::OperationOpen.to_string(), "operation already open");
    assert_eq!(SmrError::NotInOperation.to_string(), "not in operation");
    assert_eq!(SmrError::NoOpenOperation.to_string(), "no open operation");
}

#[test]
fn op_counter_strictly_increases() {
    let d: Domain<TokenRing> = Domain::with_config(cfg(2));
    let mut h = d.register().unwrap();
    for i in 1..=50 {
        h.begin_op().unwrap();
        assert_eq!(h.op_counter(), i);
        h.end_op().unwrap();
    }
}

#[test]
fn drain_on_empty_domain_is_zero() {
    let d: Domain<Ebr> = Domain::with_config(cfg(2));
    assert_eq!(d.drain().unwrap(), 0);
    let _h = d.register().unwrap();
    assert_eq!(d.drain().unwrap(), 0);
}

#[test]
fn drain_refuses_while_an_operation_is_open() {
    let d: Domain<Ebr> = Domain::with_config(cfg(2));
    let mut h = d.register().unwrap();
    h.begin_op().unwrap();
    h.retire(obj()).unwrap();
    assert_eq!(d.drain().unwrap_err(), SmrError::ThreadsActive);
    assert_eq!(SmrError::ThreadsActive.to_string(), "threads active");
    h.end_op().unwrap();
    assert_eq!(d.drain().unwrap(), 1);
    // The domain stays usable.
    h.begin_op().unwrap();
    h.retire(obj()).unwrap();
    h.end_op().unwrap();
    assert_eq!(d.drain().unwrap(), 1);
}

#[test]
fn drain_completes_partially_freed_work() {
    // 5 retires, 2 already freed by the scheme, drain frees the rest.
    let d: Domain<Qsbr, NullRecorder> = Domain::with_config(cfg(2));
    let mut h = d.register_unbound().unwrap();
    h.begin_op().unwrap();
    h.retire(obj()).unwrap();
    h.retire(obj()).unwrap();
    h.end_op().unwrap();
    h.begin_op().unwrap();
    h.end_op().unwrap();
    assert_eq!(d.stats().freed, 2);
    h.begin_op().unwrap();
    for _ in 0..3 {
        h.retire(obj()).unwrap();
    }
    h.end_op().unwrap();
    let freed_before = d.stats().freed;
    assert_eq!(freed_before, 2);
    assert_eq!(d.drain().unwrap(), 3);
    assert_eq!(d.stats().freed, 5);
    assert_eq!(d.stats().retired, 5);
}

/// Dealloc routine that records every address it frees.
fn counting_domain<S: smr_core::Scheme>(
    config: DomainConfig,
    params: S::Params,
) -> (Domain<S, NullRecorder>, DeallocTag, Arc<Mutex<Vec<usize>>>) {
    let d: Domain<S, NullRecorder> = Domain::new(config, params);
    let log = Arc::new(Mutex::new(Vec::new()));
    let seen = log.clone();
    let tag = d
        .register_dealloc(Box::new(move |ptr, size| {
            seen.lock().unwrap().push(ptr.as_ptr() as usize);
            unsafe { free_block(ptr, size) }
        }))
        .unwrap();
    (d, tag, log)
}

#[test]
fn ten_thousand_retires_drain_exactly_once() {
    // Addresses recycle once freed, so duplicates are judged against the live set.
    let d: Domain<Ebr, NullRecorder> = Domain::with_config(cfg(2));
    let live = Arc::new(Mutex::new(HashSet::new()));
    let frees = Arc::new(Mutex::new(0usize));
    let (l, f) = (live.clone(), frees.clone());
    let tag = d
        .register_dealloc(Box::new(move |ptr, size| {
            assert!(l.lock().unwrap().remove(&(ptr.as_ptr() as usize)), "freed twice");
            *f.lock().unwrap() += 1;
            unsafe { free_block(ptr, size) }
        }))
        .unwrap();
    let mut h = d.register().unwrap();
    for _ in 0..10_000 {
        h.begin_op().unwrap();
        let p = alloc_block(16);
        live.lock().unwrap().insert(p.as_ptr() as usize);
        h.retire(unsafe { RetiredObject::new(p, 16, tag) }).unwrap();
        h.end_op().unwrap();
    }
    drop(h);
    d.drain().unwrap();
    assert_eq!(*frees.lock().unwrap(), 10_000);
    assert!(live.lock().unwrap().is_empty());
}

#[test]
fn amortized_begin_frees_one_per_op() {
    let config = cfg(1).with_policy(FreePolicy::Amortized);
    let (d, tag, log) = counting_domain::<TokenRing>(
        config,
        TokenParams {
            variant: TokenVariant::Periodic,
            k_free: 100,
        },
    );
    let mut h = d.register_unbound().unwrap();
    // One-member ring: receipt every op; objects retired in op k reach the
    // freeable list at the receipt two ops later.
    h.begin_op().unwrap();
    for _ in 0..3 {
        let p = alloc_block(16);
        h.retire(unsafe { RetiredObject::new(p, 16, tag) }).unwrap();
    }
    h.end_op().unwrap();
    h.begin_op().unwrap();
    h.end_op().unwrap();
    assert_eq!(log.lock().unwrap().len(), 0);
    h.begin_op().unwrap();
    h.end_op().unwrap();
    // That receipt enqueued 3 and the same begin_op freed one.
    assert_eq!(log.lock().unwrap().len(), 1);
    assert_eq!(h.backlog(), 2);
    h.begin_op().unwrap();
    assert_eq!(log.lock().unwrap().len(), 2);
    h.end_op().unwrap();
}

#[test]
fn leaky_frees_nothing() {
    let d: Domain<Leaky> = Domain::with_config(cfg(1));
    let mut h = d.register().unwrap();
    h.begin_op().unwrap();
    let mut blocks = Vec::new();
    for _ in 0..100 {
        let p = alloc_block(8);
        blocks.push(p);
        unsafe { h.retire_block(p, 8).unwrap() };
    }
    h.end_op().unwrap();
    assert_eq!(d.drain().unwrap(), 0);
    let s = d.stats();
    assert_eq!((s.retired, s.freed, s.leaked), (100, 0, 100));
    drop(h);
    // Clean up so the test itself does not leak.
    for p in blocks {
        unsafe { free_block(p, 8) };
    }
}

#[test]
fn unregister_hands_bags_to_drain() {
    let d: Domain<TokenRing> = Domain::with_config(cfg(2));
    let mut h = d.register().unwrap();
    h.begin_op().unwrap();
    for _ in 0..10 {
        h.retire(obj()).unwrap();
    }
    drop(h);
    assert_eq!(d.drain().unwrap(), 10);
    assert_eq!(d.stats().freed, 10);
}
