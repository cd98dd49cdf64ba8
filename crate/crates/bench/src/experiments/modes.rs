// SPDX-License-Identifier: Apache-2.0

//! fib(20) entered directly in each processor mode, end to end.

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

pub const NAME: &str = "mode-latency";
pub const N: u32 = 20;

pub fn workload_name(mode: ProcessorMode) -> &'static str {
    match mode {
        ProcessorMode::Real16 => "fib16",
        ProcessorMode::Protected32 => "fib32",
        ProcessorMode::Long64 => "fib64",
    }
}

pub fn run(cfg: &Config, rec: &mut Recorder) -> Result<(), BenchError> {
    run_n(cfg, rec, N)
}

pub fn run_n(cfg: &Config, rec: &mut Recorder, n: u32) -> Result<(), BenchError> {
    let timer = cfg.timer;
    let options = RuntimeOptions {
        snapshots: false,
        ..RuntimeOptions::default()
    };
    let rt = Runtime::with_options(Pool::new(Arc::clone(&cfg.backend), 2), options);
    let expected = native_fib(n);
    let args = n.to_le_bytes();
    for mode in ProcessorMode::ALL {
        let mock = MockWorkload {
            program: programs::FIB,
            mode,
            mem_size: MIN_MEM_SIZE,
        };
        let policy = HypercallPolicy::builder().allow(HypercallNr::ReturnData).build();
        let Some((image, policy)) = cfg.workload(workload_name(mode), mock, policy)? else {
            return Err(BenchError::NeedsGuest {
                experiment: NAME,
                workload: workload_name(mode),
            });
        };
        for i in 0..cfg.warmup() + cfg.trials {
            let (c, r) = timer.time(|| rt.invoke(Invocation::new(&image, &args, &policy)));
            let got = le_u64(&r?.data)?;
            if got != expected {
                return Err(BenchError::Mismatch(format!("{mode} fib({n}) returned {got}, expected {expected}")));
            }
            if i >= cfg.warmup() {
                rec.cycles(mode.name(), c);
            }
        }
    }
    Ok(())
}
