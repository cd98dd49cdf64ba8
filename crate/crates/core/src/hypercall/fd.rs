// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, Cursor, Read, Write};
use std::sync::{Arc, Mutex};

use super::errno;

/// Lowest descriptor handed out by `open`. 0-2 are reserved for streams the
/// client installs (a service installs its connection as 0).
pub const FIRST_LOCAL_FD: u32 = 3;
pub const MAX_FDS: usize = 64;

/// Host object behind a virtine-local descriptor.
pub trait HostResource: Send {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize>;
    fn write(&mut self, buf: &[u8]) -> io::Result<usize>;
    /// Whether `send`/`recv` may use this descriptor.
    fn is_socket(&self) -> bool {
        false
    }
}

pub struct FileResource(pub File);

impl HostResource for FileResource {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.0.read(buf)
    }

    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write(buf)
    }
}

/// A connected stream.
pub struct StreamResource<S>(pub S);

impl<S: Read + Write + Send> HostResource for StreamResource<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.0.read(buf)
    }

    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf).map(|()| buf.len())
    }

    fn is_socket(&self) -> bool {
        true
    }
}

/// In-memory stand-in for a connection: reads drain `input`, writes append
/// to a shared output buffer.
#[derive(Clone, Debug, Default)]
pub struct MemoryStream {
    input: Arc<Mutex<Cursor<Vec<u8>>>>,
    output: Arc<Mutex<Vec<u8>>>,
}

impl MemoryStream {
    pub fn new(input: impl Into<Vec<u8>>) -> Self {
        MemoryStream {
            input: Arc::new(Mutex::new(Cursor::new(input.into()))),
            output: Arc::default(),
        }
    }

    pub fn output(&self) -> Vec<u8> {
        self.output.lock().unwrap().clone()
    }
}

impl HostResource for MemoryStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.input.lock().unwrap().read(buf)
    }

    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.output.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn is_socket(&self) -> bool {
        true
    }
}

/// Virtine-local descriptor table. Guests only ever see these small dense
/// integers, never host descriptor numbers.
#[derive(Default)]
pub struct FdTable {
    entries: BTreeMap<u32, Box<dyn HostResource>>,
}

impl fmt::Debug for FdTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.entries.keys()).finish()
    }
}

impl FdTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs `res` at a fixed low descriptor (0-2), replacing any previous one.
    ///
    /// # Panics
    /// If `fd` is not below [`FIRST_LOCAL_FD`].
    pub fn install(&mut self, fd: u32, res: Box<dyn HostResource>) {
        assert!(fd < FIRST_LOCAL_FD, "fd {fd} is not a reserved descriptor");
        self.entries.insert(fd, res);
    }

    /// Allocates the lowest free descriptor at or above [`FIRST_LOCAL_FD`].
    /// Returns `-EMFILE` when the table is full.
    pub fn insert(&mut self, res: Box<dyn HostResource>) -> Result<u32, i64> {
        if self.entries.len() >= MAX_FDS {
            return Err(-errno::EMFILE);
        }
        let fd = (FIRST_LOCAL_FD..)
            .find(|fd| !self.entries.contains_key(fd))
            .expect("a free descriptor exists below MAX_FDS");
        self.entries.insert(fd, res);
        Ok(fd)
    }

    pub fn get_mut(&mut self, fd: u64) -> Option<&mut (dyn HostResource + 'static)> {
        let fd = u32::try_from(fd).ok()?;
        self.entries.get_mut(&fd).map(|b| b.as_mut())
    }

    pub fn remove(&mut self, fd: u64) -> Option<Box<dyn HostResource>> {
        self.entries.remove(&u32::try_from(fd).ok()?)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
