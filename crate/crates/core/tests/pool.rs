// SPDX-License-Identifier: Apache-2.0

//! Pool invariants under random acquire/release interleavings.

use std::sync::Arc;

use proptest::prelude::*;

use virtine::backend::mock::{programs, MockBackend};
use virtine::backend::MIN_MEM_SIZE;
use virtine::hypercall::HypercallPolicy;
use virtine::image::VirtineImage;
use virtine::platform::ProcessorMode;
use virtine::pool::{disjoint, Pool, ReleaseMode, ShellState, VirtineShell};
use virtine::runtime::Runtime;

const SIZES: [usize; 3] = [MIN_MEM_SIZE, 2 * MIN_MEM_SIZE, 16 * MIN_MEM_SIZE];

#[derive(Clone, Debug)]
enum Op {
    Acquire(usize),
    /// Release the held shell at this index (mod the number held).
    Release(usize, bool),
    Drain,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..SIZES.len()).prop_map(Op::Acquire),
        3 => (any::<usize>(), any::<bool>()).prop_map(|(i, a)| Op::Release(i, a)),
        1 => Just(Op::Drain),
    ]
}

fn check(pool: &Pool, held: &[VirtineShell], acquired: u64) -> Result<(), TestCaseError> {
    let s = pool.stats();
    prop_assert_eq!(s.in_flight as usize, held.len());
    prop_assert_eq!(s.clean + s.dirty + s.destroyed + s.in_flight, s.created, "{:?}", s);
    prop_assert!((s.clean + s.dirty) as usize <= pool.capacity());
    prop_assert_eq!(s.acquires(), acquired);
    pool.inspect_clean(|shell| {
        assert_eq!(shell.state(), ShellState::Clean);
        assert!(shell.memory().is_zeroed());
    });
    for (i, a) in held.iter().enumerate() {
        for b in &held[i + 1..] {
            prop_assert!(disjoint(a, b));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn no_leaks_no_dirty_handouts(capacity in 0usize..5, ops in prop::collection::vec(op(), 1..60)) {
        let pool = Pool::new(Arc::new(MockBackend::new()), capacity);
        let mut held: Vec<VirtineShell> = Vec::new();
        let mut acquired = 0;
        for op in ops {
            match op {
                Op::Acquire(i) => {
                    let mut shell = pool.acquire(SIZES[i]).unwrap();
                    prop_assert_eq!(shell.state(), ShellState::Clean);
                    prop_assert_eq!(shell.mem_size(), SIZES[i]);
                    prop_assert!(shell.memory().is_zeroed());
                    // Scribble so a missed clean would show up later.
                    let n = shell.mem_size();
                    shell.memory_mut().fill(0, n, 0xa5).unwrap();
                    held.push(shell);
                    acquired += 1;
                }
                Op::Release(i, async_clean) if !held.is_empty() => {
                    let shell = held.swap_remove(i % held.len());
                    let mode = if async_clean { ReleaseMode::AsyncClean } else { ReleaseMode::SyncClean };
                    pool.release(shell, mode);
                }
                Op::Release(..) => {}
                Op::Drain => pool.wait_idle(),
            }
            check(&pool, &held, acquired)?;
        }
        for shell in held.drain(..) {
            pool.release(shell, ReleaseMode::AsyncClean);
        }
        pool.wait_idle();
        check(&pool, &held, acquired)?;
        prop_assert_eq!(pool.stats().dirty, 0);
    }
}

/// Shells are reused across images of the same memory size and carry nothing over.
#[test]
fn reuse_across_images_leaves_no_residue() {
    let backend = MockBackend::new();
    let rt = Runtime::new(Arc::new(backend), 1);
    let write = MockBackend::image(programs::WRITE_HELLO, ProcessorMode::Long64, MIN_MEM_SIZE);
    let policy = HypercallPolicy::builder().mask(u64::MAX).build();
    let _ = rt.invoke(virtine::runtime::Invocation::new(&write, b"secret-args", &policy));
    let mut shell = rt.pool().acquire(MIN_MEM_SIZE).unwrap();
    assert!(shell.memory().is_zeroed());
    assert_eq!(shell.generation(), 1);
    assert!(shell.fds_mut().is_empty());
    shell.load(&VirtineImage::builtin("hlt").unwrap()).unwrap();
    assert_eq!(shell.memory().read(0, 11).unwrap(), [0u8; 11]);
    rt.pool().release(shell, ReleaseMode::SyncClean);
    assert_eq!(rt.pool().stats().created, 1);
}
