// SPDX-License-Identifier: Apache-2.0

//! Guest↔host hypercall ABI and interposition.
//!
//! # Wire format
//!
//! A guest makes a hypercall by writing a [`HypercallFrame`] into its own
//! memory and executing `out %eax, %dx` with `dx = 0xff` and `eax` holding the
//! frame's guest-physical address. The write must be 4 bytes wide. The host
//! writes the result into the frame's `ret` slot before resuming the guest.
//!
//! ```text
//! offset  size  field
//!      0     8  nr       (u64, see HypercallNr)
//!      8    48  args[6]  (u64 each)
//!     56     8  ret      (i64, negative values are -errno)
//! ```
//!
//! All fields are little-endian. Buffer arguments are flat `(gpa, len)`
//! pairs; the host never follows pointers stored inside guest buffers.
//!
//! # Stat record
//!
//! `stat` writes 64 bytes: `size: u64` at 0, `mode: u64` at 8, `mtime: i64`
//! (seconds since the epoch) at 16, zeros after.

use std::fmt;

use crate::backend::{GuestMemory, MemoryError};

mod dispatch;
mod fd;
pub mod handlers;
mod policy;

pub use dispatch::{dispatch, CallEnv, CallState, Dispatch, Milestone, SnapshotMode, Violation, ViolationKind};
pub use fd::{FdTable, FileResource, HostResource, MemoryStream, StreamResource, FIRST_LOCAL_FD, MAX_FDS};
pub use handlers::{HostFs, SandboxFs, StatRecord};
pub use policy::{Handler, HandlerCall, HypercallPolicy, MalformedFrame, PolicyBuilder};

/// The one I/O port that carries hypercalls.
pub const HYPERCALL_PORT: u16 = 0xff;
/// Hypercall numbers occupy `0..MAX_NR`, one bit each in a policy mask.
pub const MAX_NR: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u64)]
pub enum HypercallNr {
    Exit = 0,
    Snapshot = 1,
    GetData = 2,
    ReturnData = 3,
    Read = 4,
    Write = 5,
    Open = 6,
    Close = 7,
    Stat = 8,
    Send = 9,
    Recv = 10,
    /// `timestamp(id, guest_tsc)`: records a milestone.
    Timestamp = 11,
}

impl HypercallNr {
    pub const ALL: [HypercallNr; 12] = [
        HypercallNr::Exit,
        HypercallNr::Snapshot,
        HypercallNr::GetData,
        HypercallNr::ReturnData,
        HypercallNr::Read,
        HypercallNr::Write,
        HypercallNr::Open,
        HypercallNr::Close,
        HypercallNr::Stat,
        HypercallNr::Send,
        HypercallNr::Recv,
        HypercallNr::Timestamp,
    ];

    pub fn from_u64(nr: u64) -> Option<Self> {
        Self::ALL.get(usize::try_from(nr).ok()?).copied()
    }

    pub const fn bit(self) -> u64 {
        1 << self as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            HypercallNr::Exit => "exit",
            HypercallNr::Snapshot => "snapshot",
            HypercallNr::GetData => "get_data",
            HypercallNr::ReturnData => "return_data",
            HypercallNr::Read => "read",
            HypercallNr::Write => "write",
            HypercallNr::Open => "open",
            HypercallNr::Close => "close",
            HypercallNr::Stat => "stat",
            HypercallNr::Send => "send",
            HypercallNr::Recv => "recv",
            HypercallNr::Timestamp => "timestamp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|nr| nr.name() == name)
    }
}

impl fmt::Display for HypercallNr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Display helper for raw numbers that may not be named.
pub struct NrDisplay(pub u64);

impl fmt::Display for NrDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match HypercallNr::from_u64(self.0) {
            Some(nr) => write!(f, "{nr}"),
            None => write!(f, "#{}", self.0),
        }
    }
}

/// Byte layout of a frame.
pub mod frame {
    pub const SIZE: usize = 64;
    pub const NR_OFFSET: usize = 0;
    pub const ARGS_OFFSET: usize = 8;
    pub const ARG_COUNT: usize = 6;
    pub const RET_OFFSET: usize = 56;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HypercallFrame {
    pub nr: u64,
    pub args: [u64; frame::ARG_COUNT],
    pub ret: i64,
}

impl HypercallFrame {
    pub fn new(nr: HypercallNr, args: &[u64]) -> Self {
        let mut f = HypercallFrame {
            nr: nr as u64,
            ..Default::default()
        };
        for (slot, a) in f.args.iter_mut().zip(args) {
            *slot = *a;
        }
        f
    }

    pub fn from_bytes(b: &[u8; frame::SIZE]) -> Self {
        let word = |off: usize| u64::from_le_bytes(b[off..off + 8].try_into().unwrap());
        HypercallFrame {
            nr: word(frame::NR_OFFSET),
            args: std::array::from_fn(|i| word(frame::ARGS_OFFSET + 8 * i)),
            ret: word(frame::RET_OFFSET) as i64,
        }
    }

    pub fn to_bytes(&self) -> [u8; frame::SIZE] {
        let mut b = [0u8; frame::SIZE];
        b[..8].copy_from_slice(&self.nr.to_le_bytes());
        for (i, a) in self.args.iter().enumerate() {
            let off = frame::ARGS_OFFSET + 8 * i;
            b[off..off + 8].copy_from_slice(&a.to_le_bytes());
        }
        b[frame::RET_OFFSET..].copy_from_slice(&self.ret.to_le_bytes());
        b
    }

    pub fn read(mem: &GuestMemory, gpa: u64) -> Result<Self, MemoryError> {
        let mut b = [0u8; frame::SIZE];
        mem.read_into(gpa, &mut b)?;
        Ok(Self::from_bytes(&b))
    }

    pub fn write(&self, mem: &mut GuestMemory, gpa: u64) -> Result<(), MemoryError> {
        mem.write(gpa, &self.to_bytes())
    }

    pub fn write_ret(mem: &mut GuestMemory, gpa: u64, ret: i64) -> Result<(), MemoryError> {
        mem.write(gpa + frame::RET_OFFSET as u64, &ret.to_le_bytes())
    }
}

/// Error numbers returned to guests as `-errno`. Fixed values, independent of the host.
pub mod errno {
    pub const EPERM: i64 = 1;
    pub const ENOENT: i64 = 2;
    pub const EIO: i64 = 5;
    pub const E2BIG: i64 = 7;
    pub const EBADF: i64 = 9;
    pub const EACCES: i64 = 13;
    pub const EINVAL: i64 = 22;
    pub const EMFILE: i64 = 24;
    pub const ENOSYS: i64 = 38;
    pub const ENOTSOCK: i64 = 88;

    pub fn from_io(err: &std::io::Error) -> i64 {
        use std::io::ErrorKind::*;
        match err.kind() {
            NotFound => ENOENT,
            PermissionDenied => EACCES,
            InvalidInput | InvalidData => EINVAL,
            _ => EIO,
        }
    }
}

/// Milestone ids passed as the first argument of `timestamp`, in boot order.
pub mod milestone {
    pub const FIRST_INSTRUCTION: u64 = 1;
    pub const LGDT32: u64 = 2;
    pub const PROTECTED_TRANSITION: u64 = 3;
    pub const LJMP32: u64 = 4;
    pub const IDENTITY_MAP: u64 = 5;
    pub const LONG_TRANSITION: u64 = 6;
    pub const LJMP64: u64 = 7;
    pub const ENTRY_C: u64 = 8;
    pub const RECV_DONE: u64 = 9;
    pub const SEND_DONE: u64 = 10;
    /// Emitted by init-heavy workloads once per allocation.
    pub const ALLOC: u64 = 0x100;

    pub fn name(id: u64) -> &'static str {
        match id {
            FIRST_INSTRUCTION => "first-instruction",
            LGDT32 => "lgdt32",
            PROTECTED_TRANSITION => "protected-transition",
            LJMP32 => "ljmp32",
            IDENTITY_MAP => "identity-map",
            LONG_TRANSITION => "long-transition",
            LJMP64 => "ljmp64",
            ENTRY_C => "entry-c",
            RECV_DONE => "recv-done",
            SEND_DONE => "send-done",
            ALLOC => "alloc",
            _ => "unknown",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn numbering_is_stable() {
        let expected = [
            "exit", "snapshot", "get_data", "return_data", "read", "write", "open", "close",
            "stat", "send", "recv", "timestamp",
        ];
        for (i, name) in expected.iter().enumerate() {
            let nr = HypercallNr::from_u64(i as u64).unwrap();
            assert_eq!(nr.name(), *name);
            assert_eq!(HypercallNr::from_name(name), Some(nr));
        }
        assert_eq!(HypercallNr::from_u64(12), None);
    }

    #[test]
    fn frame_layout_is_bit_exact() {
        let f = HypercallFrame {
            nr: 5,
            args: [1, 0x7f40, 4, 0, 0, 0xdead_beef],
            ret: -13,
        };
        let b = f.to_bytes();
        assert_eq!(&b[0..8], &[5, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[16..24], &0x7f40u64.to_le_bytes());
        assert_eq!(&b[48..56], &0xdead_beefu64.to_le_bytes());
        assert_eq!(&b[56..64], &[0xf3, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff]);
    }

    proptest! {
        #[test]
        fn frame_round_trips(nr: u64, args: [u64; 6], ret: i64) {
            let f = HypercallFrame { nr, args, ret };
            prop_assert_eq!(HypercallFrame::from_bytes(&f.to_bytes()), f);
        }
    }
}
