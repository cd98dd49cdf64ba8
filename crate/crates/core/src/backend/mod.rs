// SPDX-License-Identifier: Apache-2.0

//! Host virtualization backends.
//!
//! A [`Backend`] hands out [`Context`]s: one guest memory region, one vCPU and
//! a cached register file. The core never talks to the host virtualization
//! API directly, so pool, snapshot and policy logic run unchanged on the
//! deterministic [`mock`] backend.
//!
//! Register synchronization points: [`Context::set_registers`] updates the
//! cache which is pushed to the vCPU at the next [`Context::run`]; after an
//! exit the cache is marked stale and [`Context::registers`] refreshes it
//! from the vCPU before returning.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

pub mod memory;
pub mod mock;
pub mod regs;

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub mod kvm;

pub use memory::{GuestMemory, MemoryError, MAX_MEM_SIZE, MIN_MEM_SIZE, PAGE_SIZE};
pub use regs::{DescriptorTable, RegisterFile, Segment};

/// Why the guest stopped running.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VcpuExit {
    Halt,
    /// `out` to `port`; `value` holds the low `width` bytes written.
    IoOut { port: u16, width: u8, value: u32 },
    IoIn { port: u16, width: u8 },
    /// Triple fault or equivalent; the vCPU cannot continue.
    Shutdown,
    Fault(String),
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("hardware virtualization unavailable: {0}")]
    VirtualizationUnavailable(String),
    #[error("allocation failure: {0}")]
    AllocationFailure(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("vcpu run exceeded its deadline")]
    TimedOut,
    #[error("invalid register state: {0}")]
    InvalidRegisters(&'static str),
    #[error("host virtualization call failed: {0}")]
    Host(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackendKind {
    Hardware,
    Mock,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Hardware => "hw",
            BackendKind::Mock => "mock",
        })
    }
}

/// Factory for virtual contexts. Creation is safe from any thread.
pub trait Backend: Send + Sync + fmt::Debug {
    fn kind(&self) -> BackendKind;

    /// Creates a context with `mem_size` zeroed bytes and power-on registers.
    fn create_context(&self, mem_size: usize) -> Result<Box<dyn Context>, BackendError>;
}

/// One virtual hardware context. Used by one thread at a time; may move
/// between threads between operations.
pub trait Context: Send {
    fn memory(&self) -> &GuestMemory;
    fn memory_mut(&mut self) -> &mut GuestMemory;

    /// Current register state, refreshed from the vCPU if an exit happened
    /// since the last read.
    fn registers(&mut self) -> Result<RegisterFile, BackendError>;

    /// Replaces the cached register state; pushed to the vCPU before the next run.
    fn set_registers(&mut self, regs: &RegisterFile);

    /// Runs the guest until the next exit.
    ///
    /// Returns [`BackendError::TimedOut`] if `deadline` passes first.
    fn run(&mut self, deadline: Option<Instant>) -> Result<VcpuExit, BackendError>;

    /// Finishes an in-progress port I/O instruction without executing any
    /// further guest instructions, so that captured registers resume after it.
    fn complete_pending_io(&mut self) -> Result<(), BackendError> {
        Ok(())
    }

    /// Zeroes memory and restores power-on registers.
    fn reset(&mut self) {
        self.memory_mut().zero();
        self.set_registers(&RegisterFile::power_on());
    }

    /// The last [`reset`](Self::reset) could not bring the vCPU back to a
    /// known state; the context must be destroyed rather than reused.
    fn poisoned(&self) -> bool {
        false
    }

    /// Guest TSC minus host TSC, if the backend runs the guest on a
    /// counter it can relate to the host's.
    fn tsc_offset(&self) -> Option<i64> {
        None
    }
}

impl fmt::Debug for dyn Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Context").field("memory", self.memory()).finish()
    }
}

/// Convenience wrappers matching the operation names used throughout the docs.
pub fn read_guest(ctx: &dyn Context, gpa: u64, len: usize) -> Result<Vec<u8>, MemoryError> {
    ctx.memory().read(gpa, len)
}

pub fn write_guest(ctx: &mut dyn Context, gpa: u64, bytes: &[u8]) -> Result<(), MemoryError> {
    ctx.memory_mut().write(gpa, bytes)
}

/// Opens the hardware backend if the host supports it.
pub fn hardware() -> Result<Arc<dyn Backend>, BackendError> {
    #[cfg(all(target_os = "linux", target_arch = "x86_64"))]
    {
        Ok(Arc::new(kvm::KvmBackend::open()?))
    }
    #[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
    {
        Err(BackendError::VirtualizationUnavailable(
            "no hardware backend for this host".into(),
        ))
    }
}

/// Whether [`hardware`] would succeed.
pub fn hardware_available() -> bool {
    hardware().is_ok()
}
