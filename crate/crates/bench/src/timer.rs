// SPDX-License-Identifier: Apache-2.0

//! Cycle-counter timing with a calibrated nanosecond rate.

use std::hint::black_box;
use std::time::{Duration, Instant};

use virtine::clock::cycles;

/// Back-to-back reads used to find the timer's own cost.
const OVERHEAD_SAMPLES: usize = 10_000;
const CALIBRATION_ROUNDS: usize = 5;
const CALIBRATION_SPAN: Duration = Duration::from_millis(20);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timer {
    /// Counter ticks per nanosecond.
    pub cycles_per_ns: f64,
    /// Minimum cost of an empty timed region, in cycles.
    pub overhead: u64,
    /// Whether the measuring thread is pinned to one CPU.
    pub pinned: bool,
}

impl Timer {
    /// Pins the calling thread if possible, then measures the counter rate
    /// against the monotonic clock and the cost of an empty region.
    pub fn calibrate() -> Self {
        let pinned = pin_current_thread();
        let mut rates: Vec<f64> = (0..CALIBRATION_ROUNDS)
            .map(|_| {
                let (t0, c0) = (Instant::now(), cycles());
                while t0.elapsed() < CALIBRATION_SPAN {
                    std::hint::spin_loop();
                }
                let (c1, dt) = (cycles(), t0.elapsed());
                (c1 - c0) as f64 / dt.as_nanos() as f64
            })
            .collect();
        rates.sort_by(f64::total_cmp);
        let overhead = (0..OVERHEAD_SAMPLES)
            .map(|_| {
                let a = cycles();
                let b = cycles();
                b - a
            })
            .min()
            .unwrap_or(0);
        Timer {
            cycles_per_ns: rates[rates.len() / 2],
            overhead,
            pinned,
        }
    }

    /// Cycles spent in `f`, less the timer overhead.
    #[inline]
    pub fn time<R>(&self, f: impl FnOnce() -> R) -> (u64, R) {
        let start = cycles();
        let r = black_box(f());
        let end = cycles();
        debug_assert!(end >= start, "cycle counter went backwards");
        (end.saturating_sub(start).saturating_sub(self.overhead), r)
    }

    pub fn to_ns(&self, cycles: f64) -> f64 {
        cycles / self.cycles_per_ns
    }
}

/// Binds the calling thread to the CPU it is running on.
pub fn pin_current_thread() -> bool {
    #[cfg(target_os = "linux")]
    // SAFETY: the cpu set is a plain bitmask owned by this frame, and
    // pid 0 names the calling thread.
    unsafe {
        let cpu = libc::sched_getcpu();
        if cpu < 0 {
            return false;
        }
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu as usize, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
    #[cfg(not(target_os = "linux"))]
    false
}
