// SPDX-License-Identifier: Apache-2.0

//! The experiments. Each one records into a [`Recorder`] named after it,
//! with `-mock` appended when it ran on the mock backend.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use virtine::backend::mock::MockBackend;
use virtine::backend::{Backend, BackendKind};
use virtine::hypercall::HypercallPolicy;
use virtine::image::VirtineImage;
use virtine::manifest::Manifest;
use virtine::platform::ProcessorMode;

use crate::measure::{Measurement, Recorder};
use crate::timer::Timer;
use crate::BenchError;

pub mod amortization;
pub mod boot;
pub mod http;
pub mod image_size;
pub mod ladder;
pub mod modes;

/// Trials per variant unless told otherwise.
pub const DEFAULT_TRIALS: usize = 1000;

/// Untimed iterations before each variant's trials.
pub const WARMUP: usize = 10;

#[derive(Clone)]
pub struct Config {
    pub backend: Arc<dyn Backend>,
    pub trials: usize,
    pub timer: Timer,
    /// Workload images beyond the builtins.
    pub manifest: Option<Manifest>,
}

impl Config {
    pub fn new(backend: Arc<dyn Backend>, trials: usize) -> Self {
        Config {
            backend,
            trials,
            timer: Timer::calibrate(),
            manifest: None,
        }
    }

    pub fn is_mock(&self) -> bool {
        self.backend.kind() == BackendKind::Mock
    }

    fn warmup(&self) -> usize {
        WARMUP.min(self.trials)
    }

    /// The recorder's experiment name for `base` on this backend.
    pub fn experiment_name(&self, base: &str) -> String {
        if self.is_mock() {
            format!("{base}-mock")
        } else {
            base.to_owned()
        }
    }
}

/// Where a workload comes from on the mock backend.
#[derive(Clone, Copy, Debug)]
pub struct MockWorkload {
    pub program: &'static str,
    pub mode: ProcessorMode,
    pub mem_size: usize,
}

impl Config {
    /// The image and policy for `workload`: the manifest's entry if there is
    /// one, else the builtin image on hardware or `mock` on the mock backend.
    /// `None` if no image exists for this backend.
    pub fn workload(
        &self,
        workload: &str,
        mock: MockWorkload,
        policy: HypercallPolicy,
    ) -> Result<Option<(VirtineImage, HypercallPolicy)>, BenchError> {
        if self.is_mock() {
            let image = MockBackend::image(mock.program, mock.mode, mock.mem_size);
            return Ok(Some((image, policy)));
        }
        if let Some(entry) = self.manifest.as_ref().and_then(|m| m.workloads.get(workload)) {
            return Ok(Some((entry.image()?, entry.policy())));
        }
        Ok(VirtineImage::builtin(workload).map(|image| (image, policy)))
    }
}

impl fmt::Debug for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Config")
            .field("backend", &self.backend.kind())
            .field("trials", &self.trials)
            .field("timer", &self.timer)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    CreationLadder,
    BootBreakdown,
    ModeLatency,
    Amortization,
    ImageSize,
    Http,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::CreationLadder,
        Experiment::BootBreakdown,
        Experiment::ModeLatency,
        Experiment::Amortization,
        Experiment::ImageSize,
        Experiment::Http,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::CreationLadder => ladder::NAME,
            Experiment::BootBreakdown => boot::NAME,
            Experiment::ModeLatency => modes::NAME,
            Experiment::Amortization => amortization::NAME,
            Experiment::ImageSize => image_size::NAME,
            Experiment::Http => http::NAME,
        }
    }

    pub fn run(self, cfg: &Config) -> Result<Vec<Measurement>, BenchError> {
        let mut rec = Recorder::new(cfg.experiment_name(self.name()), cfg.timer);
        match self {
            Experiment::CreationLadder => ladder::run(cfg, &mut rec)?,
            Experiment::BootBreakdown => boot::run(cfg, &mut rec)?,
            Experiment::ModeLatency => modes::run(cfg, &mut rec)?,
            Experiment::Amortization => amortization::run(cfg, &mut rec, &amortization::DEFAULT_NS)?,
            Experiment::ImageSize => image_size::run(cfg, &mut rec, &image_size::default_sizes())?,
            Experiment::Http => http::run(cfg, &mut rec, &http::HttpParams::default())?,
        }
        Ok(rec.into_measurements())
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

/// Host reference fib, the same recurrence as the guests.
#[inline(never)]
pub fn native_fib(n: u32) -> u64 {
    if n < 2 {
        n as u64
    } else {
        native_fib(n - 1) + native_fib(n - 2)
    }
}

/// First eight bytes of a guest return value as a little-endian integer.
pub fn le_u64(bytes: &[u8]) -> Result<u64, BenchError> {
    let mut buf = [0u8; 8];
    let n = bytes.len().min(8);
    if n == 0 {
        return Err(BenchError::Mismatch("empty return value".into()));
    }
    buf[..n].copy_from_slice(&bytes[..n]);
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>(), Ok(e));
        }
        assert!("nope".parse::<Experiment>().is_err());
    }

    #[test]
    fn reference_fib() {
        let v: Vec<u64> = (0..8).map(native_fib).collect();
        assert_eq!(v, [0, 1, 1, 2, 3, 5, 8, 13]);
        assert_eq!(native_fib(20), 6765);
    }
}
