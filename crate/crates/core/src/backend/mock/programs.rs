// SPDX-License-Identifier: Apache-2.0

//! Builtin mock guest programs.
//!
//! These mirror the reference workloads (fib, echo, static HTTP, an
//! init-heavy base64 encoder) closely enough to drive the host side of every
//! hypercall path. Positions are labels stored in `rip`; intermediate values
//! are kept in guest memory so a snapshot captures them.

use super::{MockBackend, MockCpu, SCRATCH_DATA};
use crate::backend::VcpuExit;
use crate::client::http;
use crate::hypercall::{errno, milestone, HypercallNr};

pub const HLT: &str = "hlt";
pub const FIB: &str = "fib";
pub const FIB_SNAPSHOT: &str = "fib-snapshot";
pub const ECHO: &str = "echo";
pub const HTTP: &str = "http";
pub const BASE64_INIT: &str = "base64-init";
pub const DENIED_WRITE: &str = "denied-write";
pub const WRITE_HELLO: &str = "write-hello";
pub const SPIN: &str = "spin";
pub const FAULT: &str = "fault";
pub const MILESTONES: &str = "milestones";
pub const RESNAPSHOT: &str = "resnapshot";
pub const GET_DATA_TWICE: &str = "get-data-twice";
pub const SNAPSHOT_TWICE: &str = "snapshot-twice";
/// Returns its `get_data` input unchanged.
pub const IDENTITY: &str = "identity";

/// Request path that makes the HTTP program crash after reading the request.
pub const HTTP_FAULT_PATH: &str = "__fault";

/// Number of allocation markers the base64 program emits during init.
pub const BASE64_INIT_ALLOCS: u64 = 16;
const BASE64_CHUNK: usize = 16 * 1024;

pub(super) fn register_builtins(mock: &MockBackend) {
    mock.register(HLT, |_: &mut MockCpu<'_>| Some(VcpuExit::Halt));
    mock.register(FIB, |cpu: &mut MockCpu<'_>| fib_program(cpu, 0));
    mock.register(FIB_SNAPSHOT, fib_snapshot);
    mock.register(ECHO, echo);
    mock.register(HTTP, http_program);
    mock.register(BASE64_INIT, base64_init);
    mock.register(DENIED_WRITE, |cpu: &mut MockCpu<'_>| match cpu.label() {
        0 => {
            cpu.mem.write(SCRATCH_DATA, b"leak").ok()?;
            cpu.goto(1);
            Some(cpu.hypercall(HypercallNr::Write, &[1, SCRATCH_DATA, 4]))
        }
        _ => Some(VcpuExit::Halt),
    });
    mock.register(WRITE_HELLO, |cpu: &mut MockCpu<'_>| match cpu.label() {
        0 => {
            cpu.mem.write(SCRATCH_DATA, b"hello").ok()?;
            cpu.goto(1);
            Some(cpu.hypercall(HypercallNr::Write, &[1, SCRATCH_DATA, 5]))
        }
        1 => {
            let ret = cpu.ret() as u64;
            cpu.goto(2);
            Some(cpu.hypercall(HypercallNr::Exit, &[ret]))
        }
        _ => Some(VcpuExit::Halt),
    });
    mock.register(SPIN, |_: &mut MockCpu<'_>| None);
    mock.register(FAULT, |_: &mut MockCpu<'_>| {
        Some(VcpuExit::Fault("guest executed an invalid opcode".into()))
    });
    mock.register(MILESTONES, |cpu: &mut MockCpu<'_>| {
        let label = cpu.label();
        let last = milestone::ENTRY_C;
        if label < last {
            cpu.goto(label + 1);
            Some(cpu.hypercall(HypercallNr::Timestamp, &[label + 1, 0]))
        } else if label == last {
            cpu.goto(label + 1);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        } else {
            Some(VcpuExit::Halt)
        }
    });
    mock.register(RESNAPSHOT, resnapshot);
    mock.register(IDENTITY, identity);
    mock.register(GET_DATA_TWICE, |cpu: &mut MockCpu<'_>| match cpu.label() {
        0 | 1 => {
            let next = cpu.label() + 1;
            cpu.goto(next);
            Some(cpu.hypercall(HypercallNr::GetData, &[SCRATCH_DATA, 64]))
        }
        2 => {
            cpu.goto(3);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        }
        _ => Some(VcpuExit::Halt),
    });
    mock.register(SNAPSHOT_TWICE, |cpu: &mut MockCpu<'_>| match cpu.label() {
        0 | 1 => {
            let next = cpu.label() + 1;
            cpu.goto(next);
            Some(cpu.hypercall(HypercallNr::Snapshot, &[]))
        }
        2 => {
            cpu.goto(3);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        }
        _ => Some(VcpuExit::Halt),
    });
}

/// Plain recursive fib, the same shape the native baselines use.
pub fn fib(n: u64) -> u64 {
    if n < 2 {
        n
    } else {
        fib(n - 1) + fib(n - 2)
    }
}

/// Reads `n: i32` at gpa 0, returns `fib(n)` as a little-endian u64.
/// `base` is the label the computation starts at.
fn fib_program(cpu: &mut MockCpu<'_>, base: u64) -> Option<VcpuExit> {
    match cpu.label().checked_sub(base)? {
        0 => {
            let mut n = [0u8; 4];
            cpu.mem.read_into(0, &mut n).ok()?;
            let n = i32::from_le_bytes(n).max(0) as u64;
            let result = fib(std::hint::black_box(n));
            cpu.mem.write_u64(SCRATCH_DATA, result).ok()?;
            cpu.goto(base + 1);
            Some(cpu.hypercall(HypercallNr::ReturnData, &[SCRATCH_DATA, 8]))
        }
        1 => {
            cpu.goto(base + 2);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        }
        _ => Some(VcpuExit::Halt),
    }
}

fn fib_snapshot(cpu: &mut MockCpu<'_>) -> Option<VcpuExit> {
    if cpu.label() == 0 {
        cpu.goto(1);
        return Some(cpu.hypercall(HypercallNr::Snapshot, &[]));
    }
    fib_program(cpu, 1)
}

const ECHO_BUF: u64 = 0x6000;
const ECHO_CAP: u64 = 0x1000;

fn echo(cpu: &mut MockCpu<'_>) -> Option<VcpuExit> {
    match cpu.label() {
        0 => {
            cpu.goto(1);
            Some(cpu.hypercall(HypercallNr::Recv, &[0, ECHO_BUF, ECHO_CAP]))
        }
        1 => {
            let n = cpu.ret();
            if n <= 0 {
                cpu.goto(3);
                return Some(cpu.hypercall(HypercallNr::Exit, &[1]));
            }
            cpu.goto(2);
            Some(cpu.hypercall(HypercallNr::Send, &[0, ECHO_BUF, n as u64]))
        }
        2 => {
            cpu.goto(3);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        }
        _ => Some(VcpuExit::Halt),
    }
}

// HTTP program scratch layout.
const REQ_BUF: u64 = 0x10000;
const REQ_CAP: u64 = 0x1000;
const PATH_BUF: u64 = 0x11000;
const PATH_LEN: u64 = 0x11ff8;
const FILE_FD: u64 = 0x11ff0;
const HDR_LEN: u64 = 0x11fe8;
const STAT_BUF: u64 = 0x12000;
const RESP_BUF: u64 = 0x20000;

/// Static-file HTTP handler: read, stat, open, read, write, close, exit on the
/// success path. Connection is fd 0.
fn http_program(cpu: &mut MockCpu<'_>) -> Option<VcpuExit> {
    match cpu.label() {
        0 => {
            cpu.goto(1);
            Some(cpu.hypercall(HypercallNr::Read, &[0, REQ_BUF, REQ_CAP]))
        }
        1 => {
            let n = cpu.ret();
            if n <= 0 {
                return http_error(cpu, 400);
            }
            let req = cpu.mem.read(REQ_BUF, n as usize).ok()?;
            let Some(path) = http::request_path(&req) else {
                return http_error(cpu, 400);
            };
            if path == HTTP_FAULT_PATH {
                return Some(VcpuExit::Fault("http guest crashed mid-request".into()));
            }
            cpu.mem.write(PATH_BUF, path.as_bytes()).ok()?;
            cpu.mem.write_u64(PATH_LEN, path.len() as u64).ok()?;
            cpu.goto(2);
            Some(cpu.hypercall(HypercallNr::Stat, &[PATH_BUF, path.len() as u64, STAT_BUF]))
        }
        2 => {
            let r = cpu.ret();
            if r < 0 {
                return http_error(cpu, if r == -errno::EACCES { 403 } else { 404 });
            }
            let len = cpu.mem.read_u64(PATH_LEN).ok()?;
            cpu.goto(3);
            Some(cpu.hypercall(HypercallNr::Open, &[PATH_BUF, len, 0]))
        }
        3 => {
            let fd = cpu.ret();
            if fd < 0 {
                return http_error(cpu, if fd == -errno::EACCES { 403 } else { 404 });
            }
            let size = cpu.mem.read_u64(STAT_BUF).ok()?;
            let header = http::ok_header(size);
            let room = (cpu.mem.size() as u64).saturating_sub(RESP_BUF + header.len() as u64);
            if size > room {
                return http_error(cpu, 500);
            }
            cpu.mem.write(RESP_BUF, &header).ok()?;
            cpu.mem.write_u64(FILE_FD, fd as u64).ok()?;
            cpu.mem.write_u64(HDR_LEN, header.len() as u64).ok()?;
            cpu.goto(4);
            Some(cpu.hypercall(
                HypercallNr::Read,
                &[fd as u64, RESP_BUF + header.len() as u64, size],
            ))
        }
        4 => {
            let got = cpu.ret().max(0) as u64;
            let hdr = cpu.mem.read_u64(HDR_LEN).ok()?;
            cpu.goto(5);
            Some(cpu.hypercall(HypercallNr::Write, &[0, RESP_BUF, hdr + got]))
        }
        5 => {
            let fd = cpu.mem.read_u64(FILE_FD).ok()?;
            cpu.goto(6);
            Some(cpu.hypercall(HypercallNr::Close, &[fd]))
        }
        6 => {
            cpu.goto(7);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        }
        // Error path: response already composed.
        10 => {
            cpu.goto(11);
            let len = cpu.mem.read_u64(HDR_LEN).ok()?;
            Some(cpu.hypercall(HypercallNr::Write, &[0, RESP_BUF, len]))
        }
        11 => {
            cpu.goto(12);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        }
        _ => Some(VcpuExit::Halt),
    }
}

fn http_error(cpu: &mut MockCpu<'_>, status: u16) -> Option<VcpuExit> {
    let resp = http::error_response(status);
    cpu.mem.write(RESP_BUF, &resp).ok()?;
    cpu.mem.write_u64(HDR_LEN, resp.len() as u64).ok()?;
    cpu.goto(10);
    http_program(cpu)
}

const HEAP_BASE: u64 = 0x20000;
const ALLOC_COUNT: u64 = 0x7e00;
const B64_IN: u64 = 0x10000;
const B64_IN_CAP: u64 = 0x0c00;
const B64_OUT: u64 = 0x11000;

/// Heavy init (allocation markers), snapshot, then get_data, encode,
/// return_data, exit.
fn base64_init(cpu: &mut MockCpu<'_>) -> Option<VcpuExit> {
    match cpu.label() {
        0 => {
            let done = cpu.mem.read_u64(ALLOC_COUNT).ok()?;
            if done < BASE64_INIT_ALLOCS {
                let chunk = HEAP_BASE + done * BASE64_CHUNK as u64;
                cpu.mem.fill(chunk, BASE64_CHUNK, 0xa0 | done as u8).ok()?;
                cpu.mem.write_u64(ALLOC_COUNT, done + 1).ok()?;
                return Some(cpu.hypercall(HypercallNr::Timestamp, &[milestone::ALLOC, 0]));
            }
            cpu.goto(1);
            Some(cpu.hypercall(HypercallNr::Snapshot, &[]))
        }
        1 => {
            cpu.goto(2);
            Some(cpu.hypercall(HypercallNr::GetData, &[B64_IN, B64_IN_CAP]))
        }
        2 => {
            let n = cpu.ret().max(0) as usize;
            let input = cpu.mem.read(B64_IN, n).ok()?;
            let out = base64_encode(&input);
            cpu.mem.write(B64_OUT, &out).ok()?;
            cpu.goto(3);
            Some(cpu.hypercall(HypercallNr::ReturnData, &[B64_OUT, out.len() as u64]))
        }
        3 => {
            cpu.goto(4);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        }
        _ => Some(VcpuExit::Halt),
    }
}

const IDENTITY_BUF: u64 = 0x9000;
const IDENTITY_CAP: u64 = 0x1000;

fn identity(cpu: &mut MockCpu<'_>) -> Option<VcpuExit> {
    match cpu.label() {
        0 => {
            cpu.goto(1);
            Some(cpu.hypercall(HypercallNr::GetData, &[IDENTITY_BUF, IDENTITY_CAP]))
        }
        1 => {
            let n = cpu.ret().max(0) as u64;
            cpu.goto(2);
            Some(cpu.hypercall(HypercallNr::ReturnData, &[IDENTITY_BUF, n]))
        }
        2 => {
            cpu.goto(3);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        }
        _ => Some(VcpuExit::Halt),
    }
}

/// Snapshot, get_data, and if the input is `again`, snapshot once more.
fn resnapshot(cpu: &mut MockCpu<'_>) -> Option<VcpuExit> {
    match cpu.label() {
        0 => {
            cpu.goto(1);
            Some(cpu.hypercall(HypercallNr::Snapshot, &[]))
        }
        1 => {
            cpu.goto(2);
            Some(cpu.hypercall(HypercallNr::GetData, &[SCRATCH_DATA, 16]))
        }
        2 => {
            let n = cpu.ret().max(0) as usize;
            let data = cpu.mem.read(SCRATCH_DATA, n).ok()?;
            if data == b"again" {
                cpu.goto(3);
                return Some(cpu.hypercall(HypercallNr::Snapshot, &[]));
            }
            cpu.goto(4);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        }
        3 => {
            cpu.goto(4);
            Some(cpu.hypercall(HypercallNr::Exit, &[0]))
        }
        _ => Some(VcpuExit::Halt),
    }
}

const B64_ALPHABET: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

pub fn base64_encode(input: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(input.len().div_ceil(3) * 4);
    for chunk in input.chunks(3) {
        let b = [
            chunk[0],
            chunk.get(1).copied().unwrap_or(0),
            chunk.get(2).copied().unwrap_or(0),
        ];
        let n = (u32::from(b[0]) << 16) | (u32::from(b[1]) << 8) | u32::from(b[2]);
        out.push(B64_ALPHABET[(n >> 18) as usize & 63]);
        out.push(B64_ALPHABET[(n >> 12) as usize & 63]);
        out.push(if chunk.len() > 1 { B64_ALPHABET[(n >> 6) as usize & 63] } else { b'=' });
        out.push(if chunk.len() > 2 { B64_ALPHABET[n as usize & 63] } else { b'=' });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base64_reference_vectors() {
        // RFC 4648 section 10.
        for (plain, enc) in [
            ("", ""),
            ("f", "Zg=="),
            ("fo", "Zm8="),
            ("foo", "Zm9v"),
            ("foob", "Zm9vYg=="),
            ("fooba", "Zm9vYmE="),
            ("foobar", "Zm9vYmFy"),
            ("hello", "aGVsbG8="),
        ] {
            assert_eq!(base64_encode(plain.as_bytes()), enc.as_bytes(), "{plain:?}");
        }
    }

    #[test]
    fn fib_values() {
        assert_eq!(fib(0), 0);
        assert_eq!(fib(1), 1);
        assert_eq!(fib(20), 6765);
        assert_eq!(fib(25), 75025);
    }
}
