// SPDX-License-Identifier: Apache-2.0

//! Canned POSIX-like handlers.
//!
//! Every handler checks all of its buffers against guest memory before it
//! does anything on the host. Data moves through a host-side bounce buffer,
//! never a pointer into guest memory held across a host call.

use std::fs::{self, File};
use std::io;
use std::path::{Component, Path, PathBuf};
use std::time::UNIX_EPOCH;

use super::errno::{self, EACCES, EBADF, EINVAL, ENOTSOCK};
use super::{FileResource, HandlerCall, HostResource, HypercallNr, MalformedFrame};

/// Longest path accepted by `open` and `stat`.
pub const MAX_PATH: u64 = 4096;
pub const STAT_RECORD_SIZE: usize = 64;

/// Fixed 64-byte little-endian stat layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StatRecord {
    pub size: u64,
    pub mode: u64,
    pub mtime: i64,
}

impl StatRecord {
    pub fn to_bytes(&self) -> [u8; STAT_RECORD_SIZE] {
        let mut b = [0u8; STAT_RECORD_SIZE];
        b[0..8].copy_from_slice(&self.size.to_le_bytes());
        b[8..16].copy_from_slice(&self.mode.to_le_bytes());
        b[16..24].copy_from_slice(&self.mtime.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; STAT_RECORD_SIZE]) -> Self {
        let word = |off: usize| u64::from_le_bytes(b[off..off + 8].try_into().unwrap());
        StatRecord {
            size: word(0),
            mode: word(8),
            mtime: word(16) as i64,
        }
    }

    fn from_metadata(meta: &fs::Metadata) -> Self {
        let mtime = meta
            .modified()
            .ok()
            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
            .map_or(0, |d| d.as_secs() as i64);
        #[cfg(unix)]
        let mode = {
            use std::os::unix::fs::MetadataExt;
            meta.mode() as u64
        };
        #[cfg(not(unix))]
        let mode = 0;
        StatRecord {
            size: meta.len(),
            mode,
            mtime,
        }
    }
}

/// Host file access for `open` and `stat`. Paths arrive already checked to be
/// relative and free of `..`. Errors are negative errno values.
pub trait HostFs: Send + Sync {
    fn open(&self, path: &str) -> Result<Box<dyn HostResource>, i64>;
    fn stat(&self, path: &str) -> Result<StatRecord, i64>;
}

/// Read-only access to files under a directory.
#[derive(Clone, Debug)]
pub struct SandboxFs {
    root: PathBuf,
}

impl SandboxFs {
    pub fn new(root: &Path) -> Self {
        SandboxFs {
            root: root.canonicalize().unwrap_or_else(|_| root.to_path_buf()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolves symlinks and refuses anything that lands outside the root.
    fn resolve(&self, path: &str) -> Result<PathBuf, i64> {
        let full = self
            .root
            .join(path)
            .canonicalize()
            .map_err(|e| -errno::from_io(&e))?;
        if full.starts_with(&self.root) {
            Ok(full)
        } else {
            Err(-EACCES)
        }
    }
}

impl HostFs for SandboxFs {
    fn open(&self, path: &str) -> Result<Box<dyn HostResource>, i64> {
        let full = self.resolve(path)?;
        let file = File::open(&full).map_err(|e| -errno::from_io(&e))?;
        match file.metadata() {
            Ok(m) if m.is_file() => Ok(Box::new(FileResource(file))),
            Ok(_) => Err(-EACCES),
            Err(e) => Err(-errno::from_io(&e)),
        }
    }

    fn stat(&self, path: &str) -> Result<StatRecord, i64> {
        let full = self.resolve(path)?;
        let meta = fs::metadata(full).map_err(|e| -errno::from_io(&e))?;
        Ok(StatRecord::from_metadata(&meta))
    }
}

/// Lexical sandbox check, done before any host call.
pub fn check_path(path: &str) -> Result<(), i64> {
    if path.is_empty() {
        return Err(-EINVAL);
    }
    if path.contains('\0') || path.starts_with('\\') {
        return Err(-EACCES);
    }
    for c in Path::new(path).components() {
        match c {
            Component::Normal(_) | Component::CurDir => {}
            Component::ParentDir | Component::RootDir | Component::Prefix(_) => return Err(-EACCES),
        }
    }
    Ok(())
}

/// The canned handler for `nr`, if there is one.
pub fn canned(nr: HypercallNr) -> Option<fn(&mut HandlerCall<'_>) -> Result<i64, MalformedFrame>> {
    Some(match nr {
        HypercallNr::Read => hc_read,
        HypercallNr::Write => hc_write,
        HypercallNr::Open => hc_open,
        HypercallNr::Close => hc_close,
        HypercallNr::Stat => hc_stat,
        HypercallNr::Send => hc_send,
        HypercallNr::Recv => hc_recv,
        _ => return None,
    })
}

fn io_ret(r: io::Result<usize>) -> i64 {
    match r {
        Ok(n) => n as i64,
        Err(e) => -errno::from_io(&e),
    }
}

fn read_full(res: &mut dyn HostResource, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match res.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) if got == 0 => return Err(e),
            Err(_) => break,
        }
    }
    Ok(got)
}

fn do_read(call: &mut HandlerCall<'_>, socket_only: bool) -> Result<i64, MalformedFrame> {
    let [fd, buf, len, ..] = call.args;
    call.check(buf, len)?;
    let Some(res) = call.fds.get_mut(fd) else {
        return Ok(-EBADF);
    };
    if socket_only && !res.is_socket() {
        return Ok(-ENOTSOCK);
    }
    let mut bounce = vec![0u8; len as usize];
    let r = if res.is_socket() {
        res.read(&mut bounce)
    } else {
        read_full(res, &mut bounce)
    };
    let ret = io_ret(r);
    if ret > 0 {
        call.buffer_mut(buf, ret as u64)?
            .copy_from_slice(&bounce[..ret as usize]);
    }
    Ok(ret)
}

fn do_write(call: &mut HandlerCall<'_>, socket_only: bool) -> Result<i64, MalformedFrame> {
    let [fd, buf, len, ..] = call.args;
    let bounce = call.buffer(buf, len)?.to_vec();
    let Some(res) = call.fds.get_mut(fd) else {
        return Ok(-EBADF);
    };
    if socket_only && !res.is_socket() {
        return Ok(-ENOTSOCK);
    }
    Ok(io_ret(res.write(&bounce)))
}

/// `read(fd, buf, len)`.
pub fn hc_read(call: &mut HandlerCall<'_>) -> Result<i64, MalformedFrame> {
    do_read(call, false)
}

/// `write(fd, buf, len)`.
pub fn hc_write(call: &mut HandlerCall<'_>) -> Result<i64, MalformedFrame> {
    do_write(call, false)
}

/// `recv(fd, buf, len)`: `read` restricted to connected streams.
pub fn hc_recv(call: &mut HandlerCall<'_>) -> Result<i64, MalformedFrame> {
    do_read(call, true)
}

/// `send(fd, buf, len)`: `write` restricted to connected streams.
pub fn hc_send(call: &mut HandlerCall<'_>) -> Result<i64, MalformedFrame> {
    do_write(call, true)
}

fn guest_path(call: &HandlerCall<'_>, gpa: u64, len: u64) -> Result<Result<String, i64>, MalformedFrame> {
    if len > MAX_PATH {
        return Ok(Err(-EINVAL));
    }
    let bytes = call.buffer(gpa, len)?;
    let Ok(path) = std::str::from_utf8(bytes) else {
        return Ok(Err(-EINVAL));
    };
    Ok(check_path(path).map(|()| path.to_owned()))
}

/// `open(path, path_len, flags)`. Read-only; `flags` must be 0.
pub fn hc_open(call: &mut HandlerCall<'_>) -> Result<i64, MalformedFrame> {
    let [path_gpa, path_len, flags, ..] = call.args;
    let path = match guest_path(call, path_gpa, path_len)? {
        Ok(p) => p,
        Err(e) => return Ok(e),
    };
    if flags != 0 {
        return Ok(-EINVAL);
    }
    let Some(fs) = call.fs else {
        return Ok(-EACCES);
    };
    match fs.open(&path) {
        Ok(res) => Ok(call.fds.insert(res).map_or_else(|e| e, i64::from)),
        Err(e) => Ok(e),
    }
}

/// `close(fd)`.
pub fn hc_close(call: &mut HandlerCall<'_>) -> Result<i64, MalformedFrame> {
    Ok(match call.fds.remove(call.args[0]) {
        Some(_) => 0,
        None => -EBADF,
    })
}

/// `stat(path, path_len, record)`.
pub fn hc_stat(call: &mut HandlerCall<'_>) -> Result<i64, MalformedFrame> {
    let [path_gpa, path_len, out, ..] = call.args;
    call.check(out, STAT_RECORD_SIZE as u64)?;
    let path = match guest_path(call, path_gpa, path_len)? {
        Ok(p) => p,
        Err(e) => return Ok(e),
    };
    let Some(fs) = call.fs else {
        return Ok(-EACCES);
    };
    match fs.stat(&path) {
        Ok(rec) => {
            call.buffer_mut(out, STAT_RECORD_SIZE as u64)?
                .copy_from_slice(&rec.to_bytes());
            Ok(0)
        }
        Err(e) => Ok(e),
    }
}
