// SPDX-License-Identifier: Apache-2.0

//! Latency experiments for the virtine hypervisor.
//!
//! Each experiment records raw cycle samples through a [`measure::Recorder`],
//! which also stores a nanosecond copy under a `-ns` experiment name. The
//! CSV carries `experiment,variant,trial,value,unit`; [`stats`] turns a
//! variant's samples into a Tukey-filtered [`stats::SummaryRow`], and
//! [`checks`] evaluates the expected orderings and ratios.
//!
//! ```
//! use virtine_bench::measure::{read_csv, write_csv, Recorder};
//! use virtine_bench::stats::summarize;
//! use virtine_bench::timer::Timer;
//!
//! let mut rec = Recorder::new("demo", Timer::calibrate());
//! for c in [100, 101, 99, 100, 5000] {
//!     rec.cycles("noop", c);
//! }
//! let mut csv = Vec::new();
//! write_csv(&mut csv, &rec.into_measurements())?;
//! let rows = read_csv(&csv[..])?;
//! let values: Vec<f64> = rows.iter().filter(|m| m.experiment == "demo").map(|m| m.value).collect();
//! let row = summarize("noop", &values).unwrap();
//! assert_eq!((row.median, row.outlier_count), (100.0, 1));
//! # Ok::<(), virtine_bench::BenchError>(())
//! ```

use thiserror::Error;

use virtine::backend::BackendError;
use virtine::image::ImageError;
use virtine::manifest::ManifestError;
use virtine::pool::ShellError;
use virtine::runtime::VirtineError;
use virtine::snapshot::SnapshotError;

pub mod checks;
pub mod experiments;
pub mod measure;
pub mod plot;
pub mod stats;
pub mod timer;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0} needs the hardware backend: {1}")]
    NeedsHardware(&'static str, String),
    #[error("{experiment} needs a guest image for workload {workload:?} (pass --manifest)")]
    NeedsGuest {
        experiment: &'static str,
        workload: &'static str,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Virtine(#[from] VirtineError),
    #[error(transparent)]
    Shell(#[from] ShellError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("unexpected guest result: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed measurements: {0}")]
    Format(String),
    #[error("plot: {0}")]
    Plot(String),
}

/// Guide chapter, compiled as a doctest.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/benchmarks.md")]
struct Benchmarks;
