// SPDX-License-Identifier: Apache-2.0

//! Run single functions inside minimal hardware-virtualized contexts.
//!
//! A *virtine* is one function call executed in its own virtual machine:
//! flat guest memory, one vCPU, no devices, and a hypercall interface that
//! denies everything except `exit` unless the embedding program allows more.
//!
//! ```
//! use std::sync::Arc;
//! use virtine::backend::mock::{programs, MockBackend};
//! use virtine::hypercall::{HypercallNr, HypercallPolicy};
//! use virtine::platform::ProcessorMode;
//! use virtine::runtime::Runtime;
//!
//! let rt = Runtime::new(Arc::new(MockBackend::new()), 8);
//! let fib = MockBackend::image(programs::FIB, ProcessorMode::Long64, 64 * 1024);
//! let policy = HypercallPolicy::builder().allow(HypercallNr::ReturnData).build();
//! let out = rt.run_virtine(&fib, &20i32.to_le_bytes(), &policy)?;
//! assert_eq!(u64::from_le_bytes(out[..8].try_into()?), 6765);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```
//!
//! The [`backend::mock`] backend runs scripted guests anywhere; the hardware
//! backend needs `/dev/kvm`.

pub mod backend;
pub mod client;
pub mod clock;
pub mod hypercall;
pub mod image;
pub mod manifest;
pub mod platform;
pub mod pool;
pub mod runtime;
pub mod snapshot;

pub use backend::{Backend, BackendError, BackendKind, VcpuExit};
pub use hypercall::{HypercallNr, HypercallPolicy};
pub use image::VirtineImage;
pub use platform::ProcessorMode;
pub use pool::{Pool, ReleaseMode, VirtineShell};
pub use runtime::{run_virtine, Invocation, ReturnValue, RunReport, Runtime, VirtineError};

/// Opens the backend named `hw` or `mock`.
pub fn backend_by_name(name: &str) -> Result<std::sync::Arc<dyn Backend>, BackendError> {
    match name {
        "hw" | "kvm" | "hardware" => backend::hardware(),
        "mock" => Ok(std::sync::Arc::new(backend::mock::MockBackend::new())),
        other => Err(BackendError::VirtualizationUnavailable(format!("unknown backend {other:?}"))),
    }
}

/// Guide chapters, compiled as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/running.md")]
    struct Running;
    #[doc = include_str!("../../../book/src/hypercalls.md")]
    struct Hypercalls;
    #[doc = include_str!("../../../book/src/pool-and-snapshots.md")]
    struct PoolAndSnapshots;
    #[doc = include_str!("../../../book/src/platform.md")]
    struct Platform;
    #[doc = include_str!("../../../book/src/manifest.md")]
    struct Manifest;
}
