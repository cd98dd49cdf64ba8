// SPDX-License-Identifier: Apache-2.0

//! Hardware backend tests. Each test returns early, printing a note, when
//! `/dev/kvm` is not usable.

use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use virtine::backend::{self, Backend, VcpuExit};
use virtine::hypercall::{HypercallNr, HypercallPolicy, MemoryStream, ViolationKind};
use virtine::image::VirtineImage;
use virtine::platform::ProcessorMode;
use virtine::pool::{Pool, ReleaseMode};
use virtine::runtime::{Invocation, Runtime, RuntimeOptions, VirtineError};

fn hw() -> Option<Arc<dyn Backend>> {
    match backend::hardware() {
        Ok(b) => Some(b),
        Err(e) => {
            eprintln!("skipping: {e}");
            None
        }
    }
}

fn fib(n: u64) -> u64 {
    let (mut a, mut b) = (0u64, 1u64);
    for _ in 0..n {
        (a, b) = (b, a + b);
    }
    a
}

fn ret_policy() -> HypercallPolicy {
    HypercallPolicy::builder().allow(HypercallNr::ReturnData).build()
}

#[test]
fn fib_in_every_mode() {
    let Some(b) = hw() else { return };
    let rt = Runtime::new(b, 4);
    for mode in ProcessorMode::ALL {
        let image = VirtineImage::builtin_fib(mode);
        for n in [0u32, 1, 2, 10, 20] {
            let out = rt.run_virtine(&image, &n.to_le_bytes(), &ret_policy()).unwrap();
            // 16- and 32-bit guests return a 32-bit value zero-extended.
            assert_eq!(u64::from_le_bytes(out[..8].try_into().unwrap()), fib(n.into()), "{mode} fib({n})");
        }
    }
}

#[test]
fn out_then_halt_on_a_raw_shell() {
    let Some(b) = hw() else { return };
    let pool = Pool::new(b, 1);
    let mut shell = pool.acquire(64 * 1024).unwrap();
    shell.load(&VirtineImage::builtin("out-hlt").unwrap()).unwrap();
    shell.enter().unwrap();
    let deadline = Some(Instant::now() + Duration::from_secs(1));
    assert!(matches!(shell.run(deadline).unwrap(), VcpuExit::IoOut { port: 0xff, width: 1, .. }));
    assert_eq!(shell.run(deadline).unwrap(), VcpuExit::Halt);
    shell.finish();
    pool.release(shell, ReleaseMode::SyncClean);
}

#[test]
fn plain_halt_in_every_mode() {
    let Some(b) = hw() else { return };
    let rt = Runtime::new(b, 2);
    for mode in ProcessorMode::ALL {
        let image = VirtineImage::new("hlt", vec![0xf4], mode, 64 * 1024).unwrap();
        let report = rt.invoke(Invocation::new(&image, &[], &HypercallPolicy::deny_all())).unwrap();
        assert_eq!(report.exit_code, None);
        assert!(report.hypercalls.is_empty());
    }
}

#[test]
fn default_deny_stops_write() {
    let Some(b) = hw() else { return };
    let rt = Runtime::new(b, 1);
    let image = VirtineImage::builtin("denied64").unwrap();
    let stdout = MemoryStream::new(Vec::new());
    let policy = HypercallPolicy::deny_all();
    let inv = Invocation::new(&image, &[], &policy).stream(1, Box::new(stdout.clone()));
    match rt.invoke(inv) {
        Err(VirtineError::PolicyViolation(v)) => {
            assert_eq!(v.nr, Some(HypercallNr::Write as u64));
            assert_eq!(v.kind, ViolationKind::Denied);
        }
        other => panic!("expected a violation, got {other:?}"),
    }
    assert!(stdout.output().is_empty());
}

#[test]
fn spinning_guest_times_out() {
    let Some(b) = hw() else { return };
    let rt = Runtime::new(b, 1);
    let image = VirtineImage::builtin("spin").unwrap();
    let policy = HypercallPolicy::deny_all();
    let start = Instant::now();
    let err = rt
        .invoke(Invocation::new(&image, &[], &policy).timeout(Duration::from_millis(50)))
        .unwrap_err();
    assert!(matches!(err, VirtineError::Timeout(_)), "{err:?}");
    assert!(start.elapsed() < Duration::from_secs(2));
    // The pool is still usable afterwards.
    let out = rt.run_virtine(&VirtineImage::builtin_fib(ProcessorMode::Long64), &5u32.to_le_bytes(), &ret_policy());
    assert_eq!(out.unwrap()[0], 5);
}

#[test]
fn echo_over_a_stream() {
    let Some(b) = hw() else { return };
    let rt = Runtime::new(b, 1);
    let image = VirtineImage::builtin("echo64").unwrap();
    let conn = MemoryStream::new(b"hello virtine".to_vec());
    let policy = HypercallPolicy::echo();
    let report = rt
        .invoke(Invocation::new(&image, &[], &policy).stream(0, Box::new(conn.clone())))
        .unwrap();
    assert_eq!(report.exit_code, Some(0));
    assert_eq!(conn.output(), b"hello virtine");
    assert_eq!(report.hypercalls, [10, 9, 0]);
}

#[test]
fn echo_without_send_is_denied() {
    let Some(b) = hw() else { return };
    let rt = Runtime::new(b, 1);
    let image = VirtineImage::builtin("echo64").unwrap();
    let conn = MemoryStream::new(b"x".to_vec());
    let policy = HypercallPolicy::echo().without(HypercallNr::Send);
    let err = rt
        .invoke(Invocation::new(&image, &[], &policy).stream(0, Box::new(conn.clone())))
        .unwrap_err();
    assert!(matches!(err, VirtineError::PolicyViolation(v) if v.nr == Some(9)));
    assert!(conn.output().is_empty());
}

#[test]
fn snapshot_restore_matches_cold_boot() {
    let Some(b) = hw() else { return };
    let rt = Runtime::new(b, 2);
    let image = VirtineImage::builtin("fib64-snapshot").unwrap();
    let policy = ret_policy().with(HypercallNr::Snapshot);
    let run = |n: u32| {
        let args = n.to_le_bytes();
        let r = rt.invoke(Invocation::new(&image, &args, &policy)).unwrap();
        (u64::from_le_bytes(r.data[..8].try_into().unwrap()), r.from_snapshot, r.snapshot_taken)
    };
    assert_eq!(run(12), (fib(12), false, true));
    for n in [12, 3, 20, 0] {
        assert_eq!(run(n), (fib(n.into()), true, false));
    }
}

#[test]
fn snapshots_disabled_still_correct() {
    let Some(b) = hw() else { return };
    let opts = RuntimeOptions {
        snapshots: false,
        ..RuntimeOptions::default()
    };
    let rt = Runtime::with_options(Pool::new(b, 2), opts);
    let image = VirtineImage::builtin("fib64-snapshot").unwrap();
    let policy = ret_policy().with(HypercallNr::Snapshot);
    for n in [7u32, 9] {
        let r = rt.invoke(Invocation::new(&image, &n.to_le_bytes(), &policy)).unwrap();
        assert!(!r.from_snapshot && !r.snapshot_taken);
        assert_eq!(r.data[0] as u64, fib(n.into()));
    }
    assert!(rt.snapshots().is_empty());
}

#[test]
fn concurrent_virtines_are_isolated() {
    let Some(b) = hw() else { return };
    const THREADS: usize = 8;
    let rt = Arc::new(Runtime::new(b.clone(), THREADS));
    let barrier = Arc::new(Barrier::new(THREADS));
    let handles: Vec<_> = (0..THREADS)
        .map(|i| {
            let (rt, barrier) = (rt.clone(), barrier.clone());
            std::thread::spawn(move || {
                let image = VirtineImage::builtin_fib(ProcessorMode::Long64);
                barrier.wait();
                for k in 0..20 {
                    let n = ((i + k) % 16) as u32;
                    let (args, policy) = (n.to_le_bytes(), ret_policy());
                    let inv = Invocation::new(&image, &args, &policy).timeout(Duration::from_secs(10));
                    let out = rt.invoke(inv).unwrap();
                    assert_eq!(u64::from_le_bytes(out.data[..8].try_into().unwrap()), fib(n.into()));
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let stats = rt.pool().stats();
    assert_eq!(stats.acquires(), (THREADS * 20) as u64);
    assert!(stats.created <= THREADS as u64);

    // Shells live at the same time never share host memory, and each guest
    // sees only its own argument.
    let pool = Arc::new(Pool::new(b, THREADS));
    let barrier = Arc::new(Barrier::new(THREADS));
    let handles: Vec<_> = (0..THREADS)
        .map(|i| {
            let (pool, barrier) = (pool.clone(), barrier.clone());
            std::thread::spawn(move || {
                let mut shell = pool.acquire(64 * 1024).unwrap();
                shell.load(&VirtineImage::builtin_fib(ProcessorMode::Long64)).unwrap();
                shell.write_args(&(i as u32 + 1).to_le_bytes()).unwrap();
                let range = shell.host_range();
                barrier.wait();
                shell.enter().unwrap();
                let deadline = Some(Instant::now() + Duration::from_secs(10));
                // return_data, then exit.
                let exit = shell.run(deadline).unwrap();
                assert!(matches!(exit, VcpuExit::IoOut { port: 0xff, width: 4, .. }), "{exit:?}");
                let value = shell.memory().read_u64(0x7f40).unwrap();
                barrier.wait();
                shell.finish();
                pool.release(shell, ReleaseMode::SyncClean);
                (range, value)
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for (i, (a, value)) in results.iter().enumerate() {
        assert_eq!(*value, fib(i as u64 + 1));
        for (b, _) in &results[i + 1..] {
            assert!(a.end <= b.start || b.end <= a.start, "{a:?} overlaps {b:?}");
        }
    }
}

/// Random code must end in a clean result or a typed error, never a hang or
/// a host crash, and must leave the pool usable.
#[test]
fn random_images_are_contained() {
    let Some(b) = hw() else { return };
    let rt = Runtime::new(b, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let policy = HypercallPolicy::deny_all();
    let mut outcomes = std::collections::BTreeMap::<&str, u32>::new();
    for i in 0..200 {
        let mode = ProcessorMode::ALL[i % 3];
        let len = rng.gen_range(1..256);
        let code: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let image = VirtineImage::new("fuzz", code, mode, 64 * 1024).unwrap();
        let result = rt.invoke(Invocation::new(&image, &[], &policy).timeout(Duration::from_millis(20)));
        let kind = match result {
            Ok(_) => "ok",
            Err(VirtineError::PolicyViolation(_)) => "violation",
            Err(VirtineError::GuestFault(_)) => "fault",
            Err(VirtineError::Timeout(_)) => "timeout",
            Err(VirtineError::Backend(_)) => "backend",
            Err(e) => panic!("unexpected error class: {e}"),
        };
        *outcomes.entry(kind).or_default() += 1;
    }
    eprintln!("{outcomes:?}");
    let out = rt.run_virtine(&VirtineImage::builtin_fib(ProcessorMode::Long64), &10u32.to_le_bytes(), &ret_policy());
    assert_eq!(out.unwrap()[0] as u64, fib(10));
}
