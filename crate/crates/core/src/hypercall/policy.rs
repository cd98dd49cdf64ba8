// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use super::handlers::{HostFs, SandboxFs};
use super::{FdTable, HypercallNr, NrDisplay, MAX_NR};
use crate::backend::GuestMemory;

/// A hypercall argument buffer that does not lie inside guest memory.
#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
#[error("hypercall buffer {gpa:#x}+{len:#x} is outside guest memory")]
pub struct MalformedFrame {
    pub gpa: u64,
    pub len: u64,
}

/// Everything a handler may touch for one call.
pub struct HandlerCall<'a> {
    pub nr: u64,
    pub args: [u64; 6],
    pub mem: &'a mut GuestMemory,
    pub fds: &'a mut FdTable,
    pub fs: Option<&'a dyn HostFs>,
}

impl HandlerCall<'_> {
    /// Fails unless `[gpa, gpa+len)` lies inside guest memory.
    pub fn check(&self, gpa: u64, len: u64) -> Result<(), MalformedFrame> {
        if self.mem.contains(gpa, len) {
            Ok(())
        } else {
            Err(MalformedFrame { gpa, len })
        }
    }

    pub fn buffer(&self, gpa: u64, len: u64) -> Result<&[u8], MalformedFrame> {
        self.check(gpa, len)?;
        Ok(self.mem.slice(gpa, len as usize).expect("checked"))
    }

    pub fn buffer_mut(&mut self, gpa: u64, len: u64) -> Result<&mut [u8], MalformedFrame> {
        self.check(gpa, len)?;
        Ok(self.mem.slice_mut(gpa, len as usize).expect("checked"))
    }
}

/// Host-side implementation of one hypercall.
///
/// `Ok(ret)` is written back to the frame; `Err` terminates the virtine.
/// Handlers must validate every buffer before performing any host effect.
pub trait Handler: Send + Sync {
    fn handle(&self, call: &mut HandlerCall<'_>) -> Result<i64, MalformedFrame>;
}

impl<F> Handler for F
where
    F: Fn(&mut HandlerCall<'_>) -> Result<i64, MalformedFrame> + Send + Sync,
{
    fn handle(&self, call: &mut HandlerCall<'_>) -> Result<i64, MalformedFrame> {
        self(call)
    }
}

/// Which hypercalls a virtine may make and how they are serviced.
///
/// Default-deny: the empty policy permits only `exit`. `snapshot`,
/// `get_data` and `return_data` are always one-shot per execution.
/// Immutable once built; clone freely across threads.
#[derive(Clone, Default)]
pub struct HypercallPolicy {
    allow_mask: u64,
    one_shot: u64,
    handlers: HashMap<u64, Arc<dyn Handler>>,
    fs: Option<Arc<dyn HostFs>>,
    sandbox_root: Option<PathBuf>,
}

const ALWAYS_ONE_SHOT: u64 =
    HypercallNr::Snapshot.bit() | HypercallNr::GetData.bit() | HypercallNr::ReturnData.bit();

impl fmt::Debug for HypercallPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let allowed: Vec<String> = (0..MAX_NR)
            .filter(|&nr| self.allows(nr))
            .map(|nr| NrDisplay(nr).to_string())
            .collect();
        f.debug_struct("HypercallPolicy")
            .field("allowed", &allowed)
            .field("one_shot", &format_args!("{:#x}", self.one_shot_mask()))
            .field("handlers", &self.handlers.keys().collect::<Vec<_>>())
            .field("sandbox_root", &self.sandbox_root)
            .finish()
    }
}

impl HypercallPolicy {
    /// Permits nothing but `exit`.
    pub fn deny_all() -> Self {
        Self::default()
    }

    pub fn builder() -> PolicyBuilder {
        PolicyBuilder::default()
    }

    /// `send`, `recv`, `exit`.
    pub fn echo() -> Self {
        Self::builder().allow(HypercallNr::Send).allow(HypercallNr::Recv).build()
    }

    /// The seven calls a static-file server needs, with files served from `root`.
    pub fn http(root: impl Into<PathBuf>) -> Self {
        Self::builder()
            .allow_all(&[
                HypercallNr::Read,
                HypercallNr::Stat,
                HypercallNr::Open,
                HypercallNr::Write,
                HypercallNr::Close,
            ])
            .sandbox_root(root)
            .build()
    }

    /// Raw mask; bit `n` permits hypercall `n`. Bit 0 is implied.
    pub fn allow_mask(&self) -> u64 {
        self.allow_mask | HypercallNr::Exit.bit()
    }

    pub fn allows(&self, nr: u64) -> bool {
        nr < MAX_NR && self.allow_mask() & (1 << nr) != 0
    }

    pub fn one_shot_mask(&self) -> u64 {
        self.one_shot | ALWAYS_ONE_SHOT
    }

    pub fn is_one_shot(&self, nr: u64) -> bool {
        nr < MAX_NR && self.one_shot_mask() & (1 << nr) != 0
    }

    pub fn handler(&self, nr: u64) -> Option<&dyn Handler> {
        self.handlers.get(&nr).map(|h| h.as_ref())
    }

    pub fn host_fs(&self) -> Option<&dyn HostFs> {
        self.fs.as_deref()
    }

    pub fn sandbox_root(&self) -> Option<&Path> {
        self.sandbox_root.as_deref()
    }

    /// This policy with `nr` also permitted.
    pub fn with(mut self, nr: HypercallNr) -> Self {
        self.allow_mask |= nr.bit();
        self
    }

    /// This policy with `nr` removed (`exit` cannot be removed).
    pub fn without(mut self, nr: HypercallNr) -> Self {
        self.allow_mask &= !nr.bit();
        self
    }
}

#[derive(Default)]
pub struct PolicyBuilder {
    policy: HypercallPolicy,
}

impl PolicyBuilder {
    pub fn allow(mut self, nr: HypercallNr) -> Self {
        self.policy.allow_mask |= nr.bit();
        self
    }

    pub fn allow_all(mut self, nrs: &[HypercallNr]) -> Self {
        for nr in nrs {
            self.policy.allow_mask |= nr.bit();
        }
        self
    }

    /// # Panics
    /// If `nr >= 64`.
    pub fn allow_raw(mut self, nr: u64) -> Self {
        assert!(nr < MAX_NR, "hypercall number {nr} out of range");
        self.policy.allow_mask |= 1 << nr;
        self
    }

    pub fn mask(mut self, mask: u64) -> Self {
        self.policy.allow_mask |= mask;
        self
    }

    /// Binds and permits a handler for `nr`, replacing any canned handler.
    ///
    /// # Panics
    /// If `nr >= 64`.
    pub fn handler(mut self, nr: u64, handler: impl Handler + 'static) -> Self {
        self = self.allow_raw(nr);
        self.policy.handlers.insert(nr, Arc::new(handler));
        self
    }

    /// Makes `nr` callable at most once per execution.
    pub fn one_shot(mut self, nr: u64) -> Self {
        assert!(nr < MAX_NR, "hypercall number {nr} out of range");
        self.policy.one_shot |= 1 << nr;
        self
    }

    /// Serves file calls from the directory `root`.
    pub fn sandbox_root(mut self, root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        self.policy.fs = Some(Arc::new(SandboxFs::new(&root)));
        self.policy.sandbox_root = Some(root);
        self
    }

    /// Serves file calls through `fs` instead of a directory.
    pub fn host_fs(mut self, fs: impl HostFs + 'static) -> Self {
        self.policy.fs = Some(Arc::new(fs));
        self
    }

    pub fn build(self) -> HypercallPolicy {
        self.policy
    }
}
