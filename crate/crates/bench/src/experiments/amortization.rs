// SPDX-License-Identifier: Apache-2.0

//! fib(n) natively, in a virtine, and in a virtine restored from its
//! snapshot, as n grows.

use std::hint::black_box;
use std::sync::Arc;

use virtine::backend::mock::programs;
use virtine::backend::MIN_MEM_SIZE;
use virtine::hypercall::{HypercallNr, HypercallPolicy};
use virtine::platform::ProcessorMode;
use virtine::pool::Pool;
use virtine::runtime::{Invocation, Runtime, RuntimeOptions};

use super::{le_u64, native_fib, Config, MockWorkload};
use crate::measure::Recorder;
use crate::BenchError;

pub const NAME: &str = "amortization";
pub const DEFAULT_NS: [u32; 7] = [0, 5, 10, 15, 20, 25, 30];

pub const NATIVE: &str = "native";
pub const VIRTINE: &str = "virtine";
pub const SNAPSHOT: &str = "snapshot";

pub fn variant(kind: &str, n: u32) -> String {
    format!("{kind}-{n}")
}

pub fn parse_variant(v: &str) -> Option<(&str, u32)> {
    let (kind, n) = v.rsplit_once('-')?;
    Some((kind, n.parse().ok()?))
}

fn runtime(cfg: &Config, snapshots: bool) -> Runtime {
    let options = RuntimeOptions {
        snapshots,
        ..RuntimeOptions::default()
    };
    Runtime::with_options(Pool::new(Arc::clone(&cfg.backend), 2), options)
}

pub fn run(cfg: &Config, rec: &mut Recorder, ns: &[u32]) -> Result<(), BenchError> {
    let timer = cfg.timer;
    let ret = HypercallPolicy::builder().allow(HypercallNr::ReturnData).build();
    let mock = |program| MockWorkload {
        program,
        mode: ProcessorMode::Long64,
        mem_size: MIN_MEM_SIZE,
    };
    let plain = cfg
        .workload("fib64", mock(programs::FIB), ret.clone())?
        .ok_or(BenchError::NeedsGuest {
            experiment: NAME,
            workload: "fib64",
        })?;
    let snap = cfg
        .workload("fib64-snapshot", mock(programs::FIB_SNAPSHOT), ret.with(HypercallNr::Snapshot))?
        .ok_or(BenchError::NeedsGuest {
            experiment: NAME,
            workload: "fib64-snapshot",
        })?;
    let cold = runtime(cfg, false);
    let warm = runtime(cfg, true);

    for &n in ns {
        let expected = native_fib(n);
        let args = n.to_le_bytes();
        for i in 0..cfg.warmup() + cfg.trials {
            let (c, v) = timer.time(|| native_fib(black_box(n)));
            if v != expected {
                return Err(BenchError::Mismatch("native fib disagrees with itself".into()));
            }
            if i >= cfg.warmup() {
                rec.cycles(&variant(NATIVE, n), c);
            }
        }
        for (kind, rt, (image, policy)) in [(VIRTINE, &cold, &plain), (SNAPSHOT, &warm, &snap)] {
            // At least one untimed run, so the snapshot exists before timing.
            for i in 0..cfg.warmup().max(1) + cfg.trials {
                let (c, r) = timer.time(|| rt.invoke(Invocation::new(image, &args, policy)));
                let r = r?;
                let got = le_u64(&r.data)?;
                if got != expected {
                    return Err(BenchError::Mismatch(format!("{kind} fib({n}) returned {got}")));
                }
                if i >= cfg.warmup().max(1) {
                    if kind == SNAPSHOT && !r.from_snapshot {
                        return Err(BenchError::Mismatch("warm run did not start from the snapshot".into()));
                    }
                    rec.cycles(&variant(kind, n), c);
                }
            }
        }
    }
    Ok(())
}
