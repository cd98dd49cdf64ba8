// SPDX-License-Identifier: Apache-2.0

//! Per-component cost of booting from real mode to the workload, from the
//! guest's `timestamp` milestones.
//!
//! A milestone's component is the time since the previous milestone, and
//! the first one's is the time since the host entered the guest. Guest TSC
//! readings are converted to the host counter with the backend's offset;
//! without one (or when the guest passes 0) the host's exit time is used.

use std::sync::Arc;

use virtine::backend::mock::programs;
use virtine::backend::MIN_MEM_SIZE;
use virtine::clock::cycles;
use virtine::hypercall::{milestone, HypercallNr, HypercallPolicy};
use virtine::platform::ProcessorMode;
use virtine::pool::Pool;
use virtine::runtime::{Invocation, RunReport, Runtime, RuntimeOptions};

use super::{Config, MockWorkload};
use crate::measure::Recorder;
use crate::BenchError;

pub const NAME: &str = "boot-breakdown";
/// The boot-shim workload in the manifest.
pub const WORKLOAD: &str = "boot16";
/// Fresh context creation through the last boot milestone.
pub const TOTAL: &str = "total";

/// The boot components in the order the shim passes them.
pub const COMPONENTS: [u64; 8] = [
    milestone::FIRST_INSTRUCTION,
    milestone::LGDT32,
    milestone::PROTECTED_TRANSITION,
    milestone::LJMP32,
    milestone::IDENTITY_MAP,
    milestone::LONG_TRANSITION,
    milestone::LJMP64,
    milestone::ENTRY_C,
];

/// `(component, cycles)` for one run's boot milestones, in order.
pub fn components(report: &RunReport) -> Result<Vec<(&'static str, u64)>, BenchError> {
    let boot: Vec<_> = report
        .milestones
        .iter()
        .filter(|m| COMPONENTS.contains(&m.id))
        .collect();
    if boot.windows(2).any(|w| w[0].id >= w[1].id) {
        let ids: Vec<u64> = boot.iter().map(|m| m.id).collect();
        return Err(BenchError::Mismatch(format!("milestones out of order: {ids:?}")));
    }
    let guest_clock = report.tsc_offset.filter(|_| boot.iter().all(|m| m.guest_tsc != 0));
    let mut prev = report.entered_at;
    let mut out = Vec::with_capacity(boot.len());
    for m in boot {
        let at = match guest_clock {
            Some(off) => m.guest_tsc.wrapping_sub(off as u64),
            None => m.host_tsc,
        };
        out.push((milestone::name(m.id), at.saturating_sub(prev)));
        prev = at;
    }
    Ok(out)
}

pub fn run(cfg: &Config, rec: &mut Recorder) -> Result<(), BenchError> {
    let mock = MockWorkload {
        program: programs::MILESTONES,
        mode: ProcessorMode::Real16,
        mem_size: MIN_MEM_SIZE,
    };
    let policy = HypercallPolicy::builder()
        .allow(HypercallNr::Timestamp)
        .allow(HypercallNr::ReturnData)
        .build();
    let Some((image, policy)) = cfg.workload(WORKLOAD, mock, policy)? else {
        return Err(BenchError::NeedsGuest {
            experiment: NAME,
            workload: WORKLOAD,
        });
    };
    // Capacity 0: every run creates its context, as a cold boot does.
    let options = RuntimeOptions {
        snapshots: false,
        ..RuntimeOptions::default()
    };
    let rt = Runtime::with_options(Pool::new(Arc::clone(&cfg.backend), 0), options);
    let args = 0u32.to_le_bytes();
    for i in 0..cfg.warmup() + cfg.trials {
        let start = cycles();
        let report = rt.invoke(Invocation::new(&image, &args, &policy))?;
        let parts = components(&report)?;
        if parts.is_empty() {
            return Err(BenchError::Mismatch(format!("{} emitted no boot milestones", image.name())));
        }
        if i < cfg.warmup() {
            continue;
        }
        let end = report.entered_at + parts.iter().map(|p| p.1).sum::<u64>();
        rec.cycles(TOTAL, end.saturating_sub(start));
        for (name, c) in parts {
            rec.cycles(name, c);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use virtine::hypercall::Milestone;

    fn report(ms: &[(u64, u64, u64)], offset: Option<i64>) -> RunReport {
        RunReport {
            milestones: ms
                .iter()
                .map(|&(id, guest_tsc, host_tsc)| Milestone { id, guest_tsc, host_tsc })
                .collect(),
            entered_at: 1000,
            tsc_offset: offset,
            ..Default::default()
        }
    }

    #[test]
    fn guest_clock_when_offset_known() {
        // Guest counter runs 500 behind the host.
        let r = report(&[(1, 600, 9000), (2, 700, 9500), (0x100, 0, 0), (5, 1700, 9900)], Some(-500));
        assert_eq!(
            components(&r).unwrap(),
            [("first-instruction", 100), ("lgdt32", 100), ("identity-map", 1000)]
        );
    }

    #[test]
    fn host_clock_otherwise() {
        let r = report(&[(1, 0, 1100), (2, 0, 1400)], Some(7));
        assert_eq!(components(&r).unwrap(), [("first-instruction", 100), ("lgdt32", 300)]);
        let r = report(&[(1, 5, 1100)], None);
        assert_eq!(components(&r).unwrap(), [("first-instruction", 100)]);
    }

    #[test]
    fn out_of_order_is_an_error() {
        assert!(components(&report(&[(3, 0, 1), (2, 0, 2)], None)).is_err());
    }
}
