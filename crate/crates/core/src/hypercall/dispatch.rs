// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use super::handlers::canned;
use super::{
    errno, FdTable, HandlerCall, HypercallFrame, HypercallNr, HypercallPolicy, NrDisplay,
    HYPERCALL_PORT,
};
use crate::backend::{GuestMemory, VcpuExit};
use crate::clock;

/// Largest payload `return_data` accepts.
pub const MAX_RETURN: u64 = 4096;

/// How `snapshot` behaves for this execution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SnapshotMode {
    /// No snapshot exists yet: the call asks the runtime to capture one.
    #[default]
    Capture,
    /// The execution started from the image's snapshot; another one is refused.
    Restored,
    /// Snapshots are off; the call is a no-op returning 0.
    Disabled,
}

/// A `timestamp` hypercall, with the host cycle counter at the exit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Milestone {
    pub id: u64,
    pub guest_tsc: u64,
    pub host_tsc: u64,
}

/// Per-execution hypercall state.
#[derive(Debug, Default)]
pub struct CallState {
    /// Bytes `get_data` delivers.
    pub input: Vec<u8>,
    /// Bytes passed to `return_data`.
    pub output: Option<Vec<u8>>,
    /// One-shot calls already made.
    pub used: u64,
    /// Every hypercall number decoded, in order, including `exit`.
    pub trace: Vec<u64>,
    pub milestones: Vec<Milestone>,
    pub snapshot: SnapshotMode,
}

impl CallState {
    pub fn new(input: Vec<u8>, snapshot: SnapshotMode) -> Self {
        CallState {
            input,
            snapshot,
            ..Default::default()
        }
    }
}

/// What dispatch may touch.
pub struct CallEnv<'a> {
    pub mem: &'a mut GuestMemory,
    pub fds: &'a mut FdTable,
    pub state: &'a mut CallState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// Not in the policy's allow mask.
    Denied,
    /// The frame or one of its buffers is outside guest memory, or the
    /// port write was not 4 bytes wide.
    MalformedFrame,
    /// A one-shot call made a second time.
    OneShot,
    /// `snapshot` from an execution that was itself restored from the snapshot.
    SnapshotAlreadyTaken,
}

/// Why a virtine was terminated. `nr` is absent when the frame itself could not be read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub nr: Option<u64>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ViolationKind::Denied => "denied",
            ViolationKind::MalformedFrame => "malformed frame",
            ViolationKind::OneShot => "one-shot call repeated",
            ViolationKind::SnapshotAlreadyTaken => "snapshot already taken",
        };
        match self.nr {
            Some(nr) => write!(f, "{} ({kind})", NrDisplay(nr)),
            None => f.write_str(kind),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dispatch {
    /// Result written to the frame; resume the guest.
    Continue,
    Exited(i64),
    Violation(Violation),
    /// The guest is at a snapshot point. `ret` is already 0; the caller
    /// captures state and resumes.
    SnapshotRequested { frame_gpa: u64 },
}

fn violation(nr: Option<u64>, kind: ViolationKind) -> Dispatch {
    Dispatch::Violation(Violation { nr, kind })
}

/// Services one exit on the hypercall port.
///
/// Anything other than a 4-byte `IoOut` to [`HYPERCALL_PORT`] is a malformed
/// frame; callers are expected to route other ports elsewhere first.
pub fn dispatch(exit: &VcpuExit, env: &mut CallEnv<'_>, policy: &HypercallPolicy) -> Dispatch {
    let &VcpuExit::IoOut {
        port: HYPERCALL_PORT,
        width: 4,
        value,
    } = exit
    else {
        return violation(None, ViolationKind::MalformedFrame);
    };
    let gpa = u64::from(value);
    let Ok(frame) = HypercallFrame::read(env.mem, gpa) else {
        return violation(None, ViolationKind::MalformedFrame);
    };
    let nr = frame.nr;
    env.state.trace.push(nr);

    if nr == HypercallNr::Exit as u64 {
        return Dispatch::Exited(frame.args[0] as i64);
    }
    if !policy.allows(nr) {
        return violation(Some(nr), ViolationKind::Denied);
    }
    if policy.is_one_shot(nr) {
        if env.state.used & (1 << nr) != 0 {
            return violation(Some(nr), ViolationKind::OneShot);
        }
        env.state.used |= 1 << nr;
    }

    let ret = match HypercallNr::from_u64(nr) {
        Some(HypercallNr::Snapshot) => match env.state.snapshot {
            SnapshotMode::Disabled => 0,
            SnapshotMode::Restored => {
                return violation(Some(nr), ViolationKind::SnapshotAlreadyTaken)
            }
            SnapshotMode::Capture => {
                // Written before capture so the restored guest sees success.
                HypercallFrame::write_ret(env.mem, gpa, 0).expect("frame validated");
                return Dispatch::SnapshotRequested { frame_gpa: gpa };
            }
        },
        Some(HypercallNr::GetData) => {
            let [buf, cap, ..] = frame.args;
            if !env.mem.contains(buf, cap) {
                return violation(Some(nr), ViolationKind::MalformedFrame);
            }
            let input = &env.state.input;
            if input.len() as u64 > cap {
                -errno::E2BIG
            } else {
                env.mem.write(buf, input).expect("checked");
                input.len() as i64
            }
        }
        Some(HypercallNr::ReturnData) => {
            let [buf, len, ..] = frame.args;
            if !env.mem.contains(buf, len) {
                return violation(Some(nr), ViolationKind::MalformedFrame);
            }
            if len > MAX_RETURN {
                -errno::E2BIG
            } else {
                env.state.output = Some(env.mem.read(buf, len as usize).expect("checked"));
                len as i64
            }
        }
        Some(HypercallNr::Timestamp) if policy.handler(nr).is_none() => {
            env.state.milestones.push(Milestone {
                id: frame.args[0],
                guest_tsc: frame.args[1],
                host_tsc: clock::cycles(),
            });
            0
        }
        known => {
            let mut call = HandlerCall {
                nr,
                args: frame.args,
                mem: env.mem,
                fds: env.fds,
                fs: policy.host_fs(),
            };
            let result = if let Some(h) = policy.handler(nr) {
                h.handle(&mut call)
            } else if let Some(h) = known.and_then(canned) {
                h(&mut call)
            } else {
                Ok(-errno::ENOSYS)
            };
            match result {
                Ok(ret) => ret,
                Err(_) => return violation(Some(nr), ViolationKind::MalformedFrame),
            }
        }
    };
    HypercallFrame::write_ret(env.mem, gpa, ret).expect("frame validated");
    Dispatch::Continue
}
