// SPDX-License-Identifier: Apache-2.0

//! Snapshot restore is idempotent and indistinguishable from a cold boot.

use std::sync::Arc;

use proptest::prelude::*;

use virtine::backend::mock::{programs, MockBackend};
use virtine::backend::MIN_MEM_SIZE;
use virtine::hypercall::{HypercallNr, HypercallPolicy, ViolationKind};
use virtine::platform::ProcessorMode;
use virtine::pool::{Pool, ReleaseMode};
use virtine::runtime::{Invocation, Runtime, RuntimeOptions, VirtineError};
use virtine::snapshot;

fn policy() -> HypercallPolicy {
    HypercallPolicy::builder()
        .allow(HypercallNr::Snapshot)
        .allow(HypercallNr::ReturnData)
        .build()
}

fn fib_of(r: &virtine::RunReport) -> u64 {
    u64::from_le_bytes(r.data[..8].try_into().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Any sequence of arguments gives the same results with and without a
    /// snapshot, and only the first run captures one.
    #[test]
    fn warm_equals_cold(ns in prop::collection::vec(0u32..30, 1..12)) {
        let backend: Arc<MockBackend> = Arc::new(MockBackend::new());
        let warm = Runtime::new(backend.clone(), 2);
        let cold = Runtime::with_options(
            Pool::new(backend, 2),
            RuntimeOptions { snapshots: false, ..RuntimeOptions::default() },
        );
        let image = MockBackend::image(programs::FIB_SNAPSHOT, ProcessorMode::Long64, MIN_MEM_SIZE);
        let p = policy();
        for (i, n) in ns.iter().enumerate() {
            let args = n.to_le_bytes();
            let w = warm.invoke(Invocation::new(&image, &args, &p)).unwrap();
            let c = cold.invoke(Invocation::new(&image, &args, &p)).unwrap();
            prop_assert_eq!(fib_of(&w), programs::fib((*n).into()));
            prop_assert_eq!(fib_of(&w), fib_of(&c));
            prop_assert_eq!(w.from_snapshot, i > 0);
            prop_assert_eq!(w.snapshot_taken, i == 0);
            prop_assert!(!c.from_snapshot && !c.snapshot_taken);
        }
        prop_assert_eq!(warm.snapshots().len(), 1);
    }
}

/// Restoring the same snapshot twice gives byte-identical shells.
#[test]
fn restore_is_idempotent() {
    let backend = Arc::new(MockBackend::new());
    let rt = Runtime::new(backend, 4);
    let image = MockBackend::image(programs::FIB_SNAPSHOT, ProcessorMode::Long64, MIN_MEM_SIZE);
    rt.invoke(Invocation::new(&image, &3u32.to_le_bytes(), &policy())).unwrap();
    let snap = rt.snapshots().get(image.name()).unwrap();

    let mut a = rt.pool().acquire(MIN_MEM_SIZE).unwrap();
    let mut b = rt.pool().acquire(MIN_MEM_SIZE).unwrap();
    snapshot::restore(&mut a, &snap).unwrap();
    snapshot::restore(&mut b, &snap).unwrap();
    assert_eq!(a.memory().as_slice(), b.memory().as_slice());
    assert_eq!(a.memory().as_slice(), snap.memory_image());
    assert_eq!(a.registers().unwrap(), b.registers().unwrap());
    assert_eq!(&a.registers().unwrap(), snap.registers());
    // Restoring into a non-clean shell, or one of the wrong size, is refused.
    assert!(snapshot::restore(&mut a, &snap).is_err());
    let mut big = rt.pool().acquire(2 * MIN_MEM_SIZE).unwrap();
    assert!(matches!(
        snapshot::restore(&mut big, &snap),
        Err(snapshot::SnapshotError::SizeMismatch { .. })
    ));
    for s in [a, b, big] {
        rt.pool().release(s, ReleaseMode::SyncClean);
    }
}

/// A restored guest that asks for a second snapshot is stopped.
#[test]
fn second_snapshot_from_restored_guest_is_a_violation() {
    let rt = Runtime::new(Arc::new(MockBackend::new()), 2);
    let image = MockBackend::image(programs::RESNAPSHOT, ProcessorMode::Long64, MIN_MEM_SIZE);
    let p = policy().with(HypercallNr::GetData);
    rt.invoke(Invocation::new(&image, &[], &p).input("once")).unwrap();
    let err = rt.invoke(Invocation::new(&image, &[], &p).input("again")).unwrap_err();
    assert!(
        matches!(err, VirtineError::PolicyViolation(v) if v.nr == Some(1) && v.kind == ViolationKind::SnapshotAlreadyTaken),
        "{err}"
    );
}
