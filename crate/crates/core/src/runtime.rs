// SPDX-License-Identifier: Apache-2.0

//! The synchronous run loop.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::debug;
use thiserror::Error;

use crate::backend::{Backend, BackendError, VcpuExit};
use crate::hypercall::{
    dispatch, CallEnv, CallState, Dispatch, HostResource, HypercallPolicy, Milestone, SnapshotMode,
    Violation, HYPERCALL_PORT,
};
use crate::image::VirtineImage;
use crate::platform::DEFAULT_ARG_LEN;
use crate::pool::{Pool, ReleaseMode, ShellError, VirtineShell};
use crate::snapshot::{self, SnapshotCache, SnapshotError};

/// Setting this to `1` turns every snapshot request into a no-op.
pub const NO_SNAPSHOT_ENV: &str = "VIRTINE_NO_SNAPSHOT";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum VirtineError {
    #[error("arguments are {len} bytes, the argument region holds {max}")]
    ArgsTooLarge { len: usize, max: usize },
    #[error("policy violation: {0}")]
    PolicyViolation(Violation),
    #[error("guest fault: {0}")]
    GuestFault(String),
    #[error("virtine exceeded its {0:?} budget")]
    Timeout(Duration),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Shell(ShellError),
    #[error(transparent)]
    Snapshot(SnapshotError),
}

impl From<ShellError> for VirtineError {
    fn from(e: ShellError) -> Self {
        match e {
            ShellError::Backend(b) => VirtineError::Backend(b),
            other => VirtineError::Shell(other),
        }
    }
}

/// Bytes a virtine hands back through `return_data`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReturnValue(pub Vec<u8>);

impl Deref for ReturnValue {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.0
    }
}

impl From<ReturnValue> for Vec<u8> {
    fn from(r: ReturnValue) -> Self {
        r.0
    }
}

/// Everything observed during one execution.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub data: ReturnValue,
    /// `exit` argument, or `None` if the guest halted.
    pub exit_code: Option<i64>,
    /// Hypercall numbers in the order the guest made them.
    pub hypercalls: Vec<u64>,
    pub milestones: Vec<Milestone>,
    /// Host cycle counter just before the first entry into the guest.
    pub entered_at: u64,
    /// Guest TSC minus host TSC, when the backend knows it.
    pub tsc_offset: Option<i64>,
    pub from_snapshot: bool,
    pub snapshot_taken: bool,
    pub shell_id: u64,
}

/// One call into a virtine.
pub struct Invocation<'a> {
    pub image: &'a VirtineImage,
    /// Written at guest-physical 0 before entry.
    pub args: &'a [u8],
    /// Delivered by `get_data`; defaults to `args`.
    pub input: Option<Vec<u8>>,
    pub policy: &'a HypercallPolicy,
    pub snapshot: bool,
    /// Streams installed at descriptors 0-2.
    pub streams: Vec<(u32, Box<dyn HostResource>)>,
    pub timeout: Option<Duration>,
}

impl fmt::Debug for Invocation<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Invocation")
            .field("image", &self.image.name())
            .field("args", &self.args.len())
            .field("snapshot", &self.snapshot)
            .finish()
    }
}

impl<'a> Invocation<'a> {
    pub fn new(image: &'a VirtineImage, args: &'a [u8], policy: &'a HypercallPolicy) -> Self {
        Invocation {
            image,
            args,
            input: None,
            policy,
            snapshot: true,
            streams: Vec::new(),
            timeout: None,
        }
    }

    pub fn input(mut self, input: impl Into<Vec<u8>>) -> Self {
        self.input = Some(input.into());
        self
    }

    pub fn snapshot(mut self, enabled: bool) -> Self {
        self.snapshot = enabled;
        self
    }

    pub fn stream(mut self, fd: u32, res: Box<dyn HostResource>) -> Self {
        self.streams.push((fd, res));
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RuntimeOptions {
    pub release_mode: ReleaseMode,
    pub timeout: Duration,
    pub snapshots: bool,
}

impl Default for RuntimeOptions {
    /// Sync cleaning, 1s budget, snapshots unless the environment disables them.
    fn default() -> Self {
        RuntimeOptions {
            release_mode: ReleaseMode::SyncClean,
            timeout: DEFAULT_TIMEOUT,
            snapshots: snapshots_enabled_by_env(),
        }
    }
}

pub fn snapshots_enabled_by_env() -> bool {
    std::env::var(NO_SNAPSHOT_ENV).map_or(true, |v| v.trim() != "1")
}

/// A pool and snapshot cache with shared options.
pub struct Runtime {
    pool: Pool,
    snapshots: SnapshotCache,
    options: RuntimeOptions,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("pool", &self.pool)
            .field("snapshots", &self.snapshots.len())
            .field("options", &self.options)
            .finish()
    }
}

impl Runtime {
    pub fn new(backend: Arc<dyn Backend>, capacity: usize) -> Self {
        Self::with_options(Pool::new(backend, capacity), RuntimeOptions::default())
    }

    pub fn with_options(pool: Pool, options: RuntimeOptions) -> Self {
        Runtime {
            pool,
            snapshots: SnapshotCache::new(),
            options,
        }
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    pub fn snapshots(&self) -> &SnapshotCache {
        &self.snapshots
    }

    pub fn options(&self) -> &RuntimeOptions {
        &self.options
    }

    pub fn invoke(&self, inv: Invocation<'_>) -> Result<RunReport, VirtineError> {
        let cache = self.options.snapshots.then_some(&self.snapshots);
        execute(&self.pool, cache, &self.options, inv)
    }

    pub fn run_virtine(
        &self,
        image: &VirtineImage,
        args: &[u8],
        policy: &HypercallPolicy,
    ) -> Result<ReturnValue, VirtineError> {
        self.invoke(Invocation::new(image, args, policy)).map(|r| r.data)
    }
}

/// Runs `image` on a shell from `pool`, without snapshots.
pub fn run_virtine(
    pool: &Pool,
    image: &VirtineImage,
    args: &[u8],
    policy: &HypercallPolicy,
) -> Result<ReturnValue, VirtineError> {
    let options = RuntimeOptions {
        snapshots: false,
        ..RuntimeOptions::default()
    };
    execute(pool, None, &options, Invocation::new(image, args, policy)).map(|r| r.data)
}

fn execute(
    pool: &Pool,
    cache: Option<&SnapshotCache>,
    options: &RuntimeOptions,
    inv: Invocation<'_>,
) -> Result<RunReport, VirtineError> {
    let max = DEFAULT_ARG_LEN as usize;
    if inv.args.len() > max {
        return Err(VirtineError::ArgsTooLarge {
            len: inv.args.len(),
            max,
        });
    }
    let mut shell = pool.acquire(inv.image.mem_size())?;
    let result = drive(&mut shell, if inv.snapshot { cache } else { None }, options, inv);
    pool.release(shell, options.release_mode);
    result
}

fn drive(
    shell: &mut VirtineShell,
    cache: Option<&SnapshotCache>,
    options: &RuntimeOptions,
    inv: Invocation<'_>,
) -> Result<RunReport, VirtineError> {
    let image = inv.image;
    let mut report = RunReport {
        shell_id: shell.id(),
        ..Default::default()
    };
    let mode = match cache {
        None => SnapshotMode::Disabled,
        Some(cache) => match cache.get(image.name()) {
            Some(snap) => {
                snapshot::restore(shell, &snap).map_err(VirtineError::Snapshot)?;
                report.from_snapshot = true;
                SnapshotMode::Restored
            }
            None => SnapshotMode::Capture,
        },
    };
    if !report.from_snapshot {
        shell.load(image)?;
    }
    shell.write_args(inv.args)?;
    for (fd, res) in inv.streams {
        shell.fds_mut().install(fd, res);
    }

    let input = inv.input.unwrap_or_else(|| inv.args.to_vec());
    let mut state = CallState::new(input, mode);
    let timeout = inv.timeout.unwrap_or(options.timeout);
    let deadline = Instant::now() + timeout;
    shell.enter()?;
    if inv.policy.allows(crate::hypercall::HypercallNr::Timestamp as u64) {
        report.tsc_offset = shell.tsc_offset();
    }
    report.entered_at = crate::clock::cycles();

    let outcome = loop {
        let exit = match shell.run(Some(deadline)) {
            Ok(exit) => exit,
            Err(ShellError::Backend(BackendError::TimedOut)) => break Err(VirtineError::Timeout(timeout)),
            Err(e) => break Err(e.into()),
        };
        match exit {
            VcpuExit::Halt => break Ok(None),
            exit @ VcpuExit::IoOut {
                port: HYPERCALL_PORT,
                ..
            } => {
                let (mem, fds) = shell.parts();
                let mut env = CallEnv {
                    mem,
                    fds,
                    state: &mut state,
                };
                match dispatch(&exit, &mut env, inv.policy) {
                    Dispatch::Continue => {}
                    Dispatch::Exited(code) => break Ok(Some(code)),
                    Dispatch::Violation(v) => break Err(VirtineError::PolicyViolation(v)),
                    Dispatch::SnapshotRequested { .. } => {
                        let cache = cache.expect("capture mode implies a cache");
                        match cache.take(shell, image.name()) {
                            Ok(_) => report.snapshot_taken = true,
                            // Another execution of the same image got there first.
                            Err(SnapshotError::AlreadyTaken(_)) => {}
                            Err(e) => break Err(VirtineError::Snapshot(e)),
                        }
                    }
                }
            }
            VcpuExit::IoOut { port, .. } | VcpuExit::IoIn { port, .. } => {
                break Err(VirtineError::GuestFault(format!("unexpected access to port {port:#x}")))
            }
            VcpuExit::Shutdown => break Err(VirtineError::GuestFault("shutdown".into())),
            VcpuExit::Fault(why) => break Err(VirtineError::GuestFault(why)),
        }
    };
    shell.finish();
    report.hypercalls = state.trace;
    report.milestones = state.milestones;
    if let Err(e) = &outcome {
        debug!("virtine {} on shell {} failed: {e}", image.name(), report.shell_id);
    }
    report.exit_code = outcome?;
    report.data = ReturnValue(state.output.unwrap_or_default());
    Ok(report)
}
