// SPDX-License-Identifier: Apache-2.0

//! Full-copy snapshots of a running shell.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::backend::RegisterFile;
use crate::pool::{ShellError, ShellState, VirtineShell};

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot of {snapshot:#x} bytes cannot be restored into a {shell:#x}-byte shell")]
    SizeMismatch { snapshot: usize, shell: usize },
    #[error("image {0:?} already has a snapshot")]
    AlreadyTaken(String),
    #[error(transparent)]
    Shell(#[from] ShellError),
}

/// Guest memory and registers captured at a snapshot point. Immutable.
pub struct Snapshot {
    memory: Box<[u8]>,
    regs: RegisterFile,
    source_image: String,
}

impl fmt::Debug for Snapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Snapshot")
            .field("source_image", &self.source_image)
            .field("mem_size", &self.memory.len())
            .field("rip", &format_args!("{:#x}", self.regs.rip))
            .finish()
    }
}

impl Snapshot {
    pub fn memory_image(&self) -> &[u8] {
        &self.memory
    }

    pub fn registers(&self) -> &RegisterFile {
        &self.regs
    }

    pub fn source_image(&self) -> &str {
        &self.source_image
    }

    pub fn mem_size(&self) -> usize {
        self.memory.len()
    }
}

/// Deep-copies a running shell's memory and registers.
///
/// If the guest is stopped at a port write, the write is completed first so
/// that a restored guest resumes after it.
pub fn take_snapshot(shell: &mut VirtineShell, source_image: &str) -> Result<Snapshot, SnapshotError> {
    if shell.state() != ShellState::Running {
        return Err(ShellError::State {
            op: "snapshot",
            state: shell.state(),
        }
        .into());
    }
    shell.complete_pending_io()?;
    let regs = shell.registers().map_err(ShellError::from)?;
    Ok(Snapshot {
        memory: shell.memory().as_slice().into(),
        regs,
        source_image: source_image.to_owned(),
    })
}

/// Copies `snapshot` into a clean shell, leaving it `Loaded`.
pub fn restore(shell: &mut VirtineShell, snapshot: &Snapshot) -> Result<(), SnapshotError> {
    if snapshot.mem_size() != shell.mem_size() {
        return Err(SnapshotError::SizeMismatch {
            snapshot: snapshot.mem_size(),
            shell: shell.mem_size(),
        });
    }
    shell.load_state(&snapshot.memory, &snapshot.regs)?;
    Ok(())
}

/// At most one snapshot per image name.
#[derive(Debug, Default)]
pub struct SnapshotCache {
    by_image: RwLock<HashMap<String, Arc<Snapshot>>>,
}

impl SnapshotCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, image: &str) -> Option<Arc<Snapshot>> {
        self.by_image.read().unwrap().get(image).cloned()
    }

    pub fn contains(&self, image: &str) -> bool {
        self.by_image.read().unwrap().contains_key(image)
    }

    /// Captures and stores a snapshot of `shell` for `image`.
    pub fn take(&self, shell: &mut VirtineShell, image: &str) -> Result<Arc<Snapshot>, SnapshotError> {
        if self.contains(image) {
            return Err(SnapshotError::AlreadyTaken(image.to_owned()));
        }
        let snap = take_snapshot(shell, image)?;
        self.insert(snap)
    }

    /// Stores `snapshot`; fails if its image already has one.
    pub fn insert(&self, snapshot: Snapshot) -> Result<Arc<Snapshot>, SnapshotError> {
        let mut map = self.by_image.write().unwrap();
        if map.contains_key(&snapshot.source_image) {
            return Err(SnapshotError::AlreadyTaken(snapshot.source_image));
        }
        let snap = Arc::new(snapshot);
        map.insert(snap.source_image.clone(), Arc::clone(&snap));
        Ok(snap)
    }

    pub fn remove(&self, image: &str) -> Option<Arc<Snapshot>> {
        self.by_image.write().unwrap().remove(image)
    }

    pub fn len(&self) -> usize {
        self.by_image.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockBackend;
    use crate::backend::{Backend, MIN_MEM_SIZE};
    use crate::platform::ProcessorMode;

    fn running(mem_size: usize) -> VirtineShell {
        let mock = MockBackend::new();
        let mut shell = VirtineShell::new(mock.create_context(mem_size).unwrap());
        shell.load(&MockBackend::image("hlt", ProcessorMode::Long64, mem_size)).unwrap();
        shell.enter().unwrap();
        shell
    }

    #[test]
    fn round_trip() {
        let mut shell = running(MIN_MEM_SIZE);
        shell.memory_mut().write(0x9000, b"before").unwrap();
        let snap = take_snapshot(&mut shell, "x").unwrap();
        shell.memory_mut().write(0x9000, b"after!").unwrap();
        shell.clean();
        restore(&mut shell, &snap).unwrap();
        assert_eq!(shell.state(), ShellState::Loaded);
        assert_eq!(shell.memory().as_slice(), snap.memory_image());
        assert_eq!(&shell.registers().unwrap(), snap.registers());
    }

    #[test]
    fn restore_requires_clean_matching_shell() {
        let mut shell = running(MIN_MEM_SIZE);
        let snap = take_snapshot(&mut shell, "x").unwrap();
        assert!(matches!(restore(&mut shell, &snap), Err(SnapshotError::Shell(_))));
        let mut other = running(2 * MIN_MEM_SIZE);
        other.clean();
        assert!(matches!(restore(&mut other, &snap), Err(SnapshotError::SizeMismatch { .. })));
    }

    #[test]
    fn one_per_image() {
        let cache = SnapshotCache::new();
        let mut shell = running(MIN_MEM_SIZE);
        cache.take(&mut shell, "fib").unwrap();
        assert!(matches!(cache.take(&mut shell, "fib"), Err(SnapshotError::AlreadyTaken(_))));
        cache.take(&mut shell, "other").unwrap();
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn take_requires_running() {
        let mock = MockBackend::new();
        let mut shell = VirtineShell::new(mock.create_context(MIN_MEM_SIZE).unwrap());
        assert!(take_snapshot(&mut shell, "x").is_err());
    }
}
