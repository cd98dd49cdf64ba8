// SPDX-License-Identifier: Apache-2.0

//! Shells and the shell pool.
//!
//! A [`VirtineShell`] moves through `Clean → Loaded → Running → Dirty` and
//! back to `Clean` only by being cleaned. The pool keeps clean shells in
//! exact-size buckets and never hands out a dirty one: a caller that finds
//! only dirty shells cleans one inline.
//!
//! Releasing a shell consumes it, so a handle cannot outlive its release:
//!
//! ```compile_fail
//! # use std::sync::Arc;
//! # use virtine::backend::mock::MockBackend;
//! # use virtine::pool::{Pool, ReleaseMode};
//! let pool = Pool::new(Arc::new(MockBackend::new()), 4);
//! let shell = pool.acquire(64 * 1024).unwrap();
//! pool.release(shell, ReleaseMode::SyncClean);
//! shell.memory(); // use after release
//! ```

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Instant;

use thiserror::Error;

use crate::backend::{Backend, BackendError, Context, GuestMemory, MemoryError, RegisterFile, VcpuExit};
use crate::hypercall::FdTable;
use crate::image::VirtineImage;
use crate::platform::{self, PlatformError, PlatformLayout, ARG_BASE, DEFAULT_ARG_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShellState {
    /// Memory all zero, power-on registers, no descriptors.
    Clean,
    Loaded,
    Running,
    Dirty,
}

#[derive(Debug, Error)]
pub enum ShellError {
    #[error("cannot {op} a {state:?} shell")]
    State { op: &'static str, state: ShellState },
    #[error("image needs {expected:#x} bytes of memory, shell has {found:#x}")]
    SizeMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

static NEXT_SHELL_ID: AtomicU64 = AtomicU64::new(0);

/// One virtual hardware context plus its lifecycle state.
pub struct VirtineShell {
    ctx: Box<dyn Context>,
    state: ShellState,
    generation: u64,
    id: u64,
    fds: FdTable,
}

impl fmt::Debug for VirtineShell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VirtineShell")
            .field("id", &self.id)
            .field("state", &self.state)
            .field("generation", &self.generation)
            .field("mem_size", &self.mem_size())
            .finish()
    }
}

impl VirtineShell {
    /// Wraps a freshly created (zeroed, power-on) context.
    pub fn new(ctx: Box<dyn Context>) -> Self {
        VirtineShell {
            ctx,
            state: ShellState::Clean,
            generation: 0,
            id: NEXT_SHELL_ID.fetch_add(1, Ordering::Relaxed),
            fds: FdTable::new(),
        }
    }

    pub fn state(&self) -> ShellState {
        self.state
    }

    /// Number of times this shell has been cleaned.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Process-unique id, stable across cleans.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn mem_size(&self) -> usize {
        self.ctx.memory().size()
    }

    pub fn memory(&self) -> &GuestMemory {
        self.ctx.memory()
    }

    pub fn memory_mut(&mut self) -> &mut GuestMemory {
        self.ctx.memory_mut()
    }

    pub fn registers(&mut self) -> Result<RegisterFile, BackendError> {
        self.ctx.registers()
    }

    pub fn set_registers(&mut self, regs: &RegisterFile) {
        self.ctx.set_registers(regs)
    }

    pub fn fds_mut(&mut self) -> &mut FdTable {
        &mut self.fds
    }

    /// Memory, descriptors and state together, for hypercall dispatch.
    pub fn parts(&mut self) -> (&mut GuestMemory, &mut FdTable) {
        (self.ctx.memory_mut(), &mut self.fds)
    }

    /// Host address range backing guest memory.
    pub fn host_range(&self) -> Range<usize> {
        self.ctx.memory().host_range()
    }

    fn expect(&self, op: &'static str, ok: &[ShellState]) -> Result<(), ShellError> {
        if ok.contains(&self.state) {
            Ok(())
        } else {
            Err(ShellError::State { op, state: self.state })
        }
    }

    /// Copies `image` to the load address and synthesizes the platform for its entry mode.
    pub fn load(&mut self, image: &VirtineImage) -> Result<(), ShellError> {
        self.expect("load", &[ShellState::Clean])?;
        if image.mem_size() != self.mem_size() {
            return Err(ShellError::SizeMismatch {
                expected: image.mem_size(),
                found: self.mem_size(),
            });
        }
        let layout = PlatformLayout::new(self.mem_size(), image.code().len() as u64);
        let mem = self.ctx.memory_mut();
        mem.write(image.load_gpa(), image.code())?;
        let regs = platform::synthesize(mem, &layout, image.entry_mode())?;
        self.ctx.set_registers(&regs);
        self.state = ShellState::Loaded;
        Ok(())
    }

    /// Restores memory and registers captured elsewhere (see [`crate::snapshot`]).
    pub(crate) fn load_state(&mut self, memory: &[u8], regs: &RegisterFile) -> Result<(), ShellError> {
        self.expect("restore", &[ShellState::Clean])?;
        if memory.len() != self.mem_size() {
            return Err(ShellError::SizeMismatch {
                expected: memory.len(),
                found: self.mem_size(),
            });
        }
        self.ctx.memory_mut().copy_from(memory)?;
        self.ctx.set_registers(regs);
        self.state = ShellState::Loaded;
        Ok(())
    }

    /// Zeroes the argument region and writes `args` at its start.
    pub fn write_args(&mut self, args: &[u8]) -> Result<(), ShellError> {
        self.expect("write arguments to", &[ShellState::Loaded])?;
        if args.len() as u64 > DEFAULT_ARG_LEN {
            return Err(MemoryError::OutOfBounds {
                gpa: ARG_BASE,
                len: args.len() as u64,
            }
            .into());
        }
        let mem = self.ctx.memory_mut();
        mem.fill(ARG_BASE, DEFAULT_ARG_LEN as usize, 0)?;
        mem.write(ARG_BASE, args)?;
        Ok(())
    }

    /// Loaded → Running.
    pub fn enter(&mut self) -> Result<(), ShellError> {
        self.expect("enter", &[ShellState::Loaded])?;
        self.state = ShellState::Running;
        Ok(())
    }

    pub fn run(&mut self, deadline: Option<Instant>) -> Result<VcpuExit, ShellError> {
        self.expect("run", &[ShellState::Running])?;
        Ok(self.ctx.run(deadline)?)
    }

    /// Lets the backend finish the port write the guest is stopped at.
    pub fn complete_pending_io(&mut self) -> Result<(), ShellError> {
        self.expect("complete I/O on", &[ShellState::Running])?;
        Ok(self.ctx.complete_pending_io()?)
    }

    /// Running → Dirty.
    pub fn finish(&mut self) {
        if self.state != ShellState::Clean {
            self.state = ShellState::Dirty;
        }
    }

    /// See [`Context::tsc_offset`](crate::backend::Context::tsc_offset).
    pub fn tsc_offset(&self) -> Option<i64> {
        self.ctx.tsc_offset()
    }

    /// False once the backend reports the context cannot be reset; the pool
    /// destroys such shells instead of pooling them.
    pub fn reusable(&self) -> bool {
        !self.ctx.poisoned()
    }

    /// Zeroes memory, resets registers, empties the descriptor table.
    pub fn clean(&mut self) {
        self.ctx.reset();
        self.fds.clear();
        self.generation += 1;
        self.state = ShellState::Clean;
    }
}

/// Whether two shells' guest memories share any host bytes.
pub fn disjoint(a: &VirtineShell, b: &VirtineShell) -> bool {
    let (a, b) = (a.host_range(), b.host_range());
    !crate::backend::memory::ranges_overlap(&a, &b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReleaseMode {
    /// Clean before `release` returns.
    #[default]
    SyncClean,
    /// Queue for the background cleaner.
    AsyncClean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub created: u64,
    pub reused: u64,
    pub cleaned_sync: u64,
    pub cleaned_async: u64,
    pub destroyed: u64,
    pub in_flight: u64,
    pub clean: u64,
    /// Queued or being cleaned.
    pub dirty: u64,
}

impl PoolStats {
    pub fn acquires(&self) -> u64 {
        self.created + self.reused
    }
}

#[derive(Default)]
struct PoolState {
    clean: HashMap<usize, VecDeque<VirtineShell>>,
    dirty: VecDeque<VirtineShell>,
    /// Size of the shell the cleaner currently holds.
    cleaning: Option<usize>,
    stats: PoolStats,
    shutdown: bool,
}

impl PoolState {
    fn pooled(&self) -> usize {
        (self.stats.clean + self.stats.dirty) as usize
    }
}

struct Inner {
    backend: Arc<dyn Backend>,
    capacity: usize,
    state: Mutex<PoolState>,
    changed: Condvar,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, PoolState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn push_clean(&self, st: &mut PoolState, shell: VirtineShell) -> Option<VirtineShell> {
        if st.pooled() >= self.capacity || !shell.reusable() {
            st.stats.destroyed += 1;
            return Some(shell);
        }
        st.stats.clean += 1;
        st.clean.entry(shell.mem_size()).or_default().push_back(shell);
        None
    }

    fn cleaner(self: Arc<Self>) {
        lower_priority();
        let mut st = self.lock();
        loop {
            if let Some(mut shell) = st.dirty.pop_front() {
                st.cleaning = Some(shell.mem_size());
                drop(st);
                shell.clean();
                st = self.lock();
                st.cleaning = None;
                st.stats.cleaned_async += 1;
                st.stats.dirty -= 1;
                let discard = if shell.reusable() {
                    st.stats.clean += 1;
                    st.clean.entry(shell.mem_size()).or_default().push_back(shell);
                    None
                } else {
                    st.stats.destroyed += 1;
                    Some(shell)
                };
                self.changed.notify_all();
                if discard.is_some() {
                    drop(st);
                    drop(discard);
                    st = self.lock();
                }
            } else if st.shutdown {
                return;
            } else {
                st = self.changed.wait(st).unwrap_or_else(|e| e.into_inner());
            }
        }
    }
}

/// Background cleaning only gets otherwise-idle CPU time, so waking the
/// cleaner never preempts the thread serving requests; an acquire that
/// finds only dirty shells cleans one itself.
fn lower_priority() {
    #[cfg(target_os = "linux")]
    {
        let param = libc::sched_param { sched_priority: 0 };
        // SAFETY: pid 0 is the calling thread and `param` outlives the call.
        if unsafe { libc::sched_setscheduler(0, libc::SCHED_IDLE, &param) } != 0 {
            log::debug!("cleaner keeps normal priority: {}", std::io::Error::last_os_error());
        }
    }
}

/// Clean-shell pool. Safe to share across threads.
pub struct Pool {
    inner: Arc<Inner>,
    cleaner: Mutex<Option<JoinHandle<()>>>,
}

impl fmt::Debug for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pool")
            .field("backend", &self.inner.backend.kind())
            .field("capacity", &self.inner.capacity)
            .field("stats", &self.stats())
            .finish()
    }
}

impl Pool {
    /// A pool holding at most `capacity` idle shells.
    pub fn new(backend: Arc<dyn Backend>, capacity: usize) -> Self {
        Pool {
            inner: Arc::new(Inner {
                backend,
                capacity,
                state: Mutex::new(PoolState::default()),
                changed: Condvar::new(),
            }),
            cleaner: Mutex::new(None),
        }
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.inner.backend
    }

    pub fn capacity(&self) -> usize {
        self.inner.capacity
    }

    pub fn stats(&self) -> PoolStats {
        self.inner.lock().stats
    }

    /// A clean shell with exactly `mem_size` bytes: pooled if possible, else new.
    pub fn acquire(&self, mem_size: usize) -> Result<VirtineShell, BackendError> {
        let mut st = self.inner.lock();
        loop {
            if let Some(shell) = st.clean.get_mut(&mem_size).and_then(VecDeque::pop_front) {
                st.stats.clean -= 1;
                st.stats.reused += 1;
                st.stats.in_flight += 1;
                return Ok(shell);
            }
            if let Some(pos) = st.dirty.iter().position(|s| s.mem_size() == mem_size) {
                let mut shell = st.dirty.remove(pos).expect("position is valid");
                st.stats.dirty -= 1;
                st.stats.reused += 1;
                st.stats.cleaned_sync += 1;
                st.stats.in_flight += 1;
                drop(st);
                shell.clean();
                if shell.reusable() {
                    return Ok(shell);
                }
                drop(shell);
                st = self.inner.lock();
                st.stats.reused -= 1;
                st.stats.in_flight -= 1;
                st.stats.destroyed += 1;
                continue;
            }
            if st.cleaning == Some(mem_size) {
                st = self.inner.changed.wait(st).unwrap_or_else(|e| e.into_inner());
                continue;
            }
            break;
        }
        drop(st);
        let ctx = self.inner.backend.create_context(mem_size)?;
        let mut st = self.inner.lock();
        st.stats.created += 1;
        st.stats.in_flight += 1;
        Ok(VirtineShell::new(ctx))
    }

    /// Returns a shell to the pool. Shells beyond capacity are destroyed.
    pub fn release(&self, mut shell: VirtineShell, mode: ReleaseMode) {
        shell.finish();
        let overflow = match mode {
            ReleaseMode::SyncClean => {
                shell.clean();
                let mut st = self.inner.lock();
                st.stats.in_flight -= 1;
                st.stats.cleaned_sync += 1;
                self.inner.push_clean(&mut st, shell)
            }
            ReleaseMode::AsyncClean => {
                self.ensure_cleaner();
                let mut st = self.inner.lock();
                st.stats.in_flight -= 1;
                if st.pooled() >= self.inner.capacity {
                    st.stats.destroyed += 1;
                    Some(shell)
                } else {
                    st.stats.dirty += 1;
                    st.dirty.push_back(shell);
                    self.inner.changed.notify_all();
                    None
                }
            }
        };
        // Context teardown happens outside the lock.
        drop(overflow);
    }

    /// Creates shells until `count` clean shells of `mem_size` are pooled (bounded by capacity).
    pub fn prewarm(&self, mem_size: usize, count: usize) -> Result<(), BackendError> {
        for _ in 0..count {
            {
                let st = self.inner.lock();
                let have = st.clean.get(&mem_size).map_or(0, VecDeque::len);
                if have >= count || st.pooled() >= self.inner.capacity {
                    return Ok(());
                }
            }
            let shell = VirtineShell::new(self.inner.backend.create_context(mem_size)?);
            let mut st = self.inner.lock();
            st.stats.created += 1;
            let overflow = self.inner.push_clean(&mut st, shell);
            drop(st);
            drop(overflow);
        }
        Ok(())
    }

    /// Blocks until the background cleaner has nothing queued.
    pub fn wait_idle(&self) {
        let mut st = self.inner.lock();
        while !st.dirty.is_empty() || st.cleaning.is_some() {
            st = self.inner.changed.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Runs `f` over every idle clean shell. Holds the pool lock throughout.
    pub fn inspect_clean(&self, mut f: impl FnMut(&VirtineShell)) {
        let st = self.inner.lock();
        st.clean.values().flatten().for_each(&mut f);
    }

    fn ensure_cleaner(&self) {
        let mut slot = self.cleaner.lock().unwrap_or_else(|e| e.into_inner());
        if slot.is_none() {
            let inner = Arc::clone(&self.inner);
            let handle = std::thread::Builder::new()
                .name("virtine-cleaner".into())
                .spawn(move || inner.cleaner())
                .expect("spawn cleaner thread");
            *slot = Some(handle);
        }
    }
}

impl Drop for Pool {
    fn drop(&mut self) {
        self.inner.lock().shutdown = true;
        self.inner.changed.notify_all();
        if let Some(handle) = self.cleaner.get_mut().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = handle.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockBackend;
    use crate::backend::MIN_MEM_SIZE;
    use crate::platform::ProcessorMode;

    fn pool(capacity: usize) -> Pool {
        Pool::new(Arc::new(MockBackend::new()), capacity)
    }

    fn dirty(pool: &Pool) -> VirtineShell {
        let mut s = pool.acquire(MIN_MEM_SIZE).unwrap();
        s.memory_mut().fill(0, MIN_MEM_SIZE, 0x5a).unwrap();
        s
    }

    fn accounting_holds(pool: &Pool) {
        let s = pool.stats();
        assert_eq!(s.clean + s.dirty + s.destroyed + s.in_flight, s.created, "{s:?}");
    }

    #[test]
    fn cold_then_reuse() {
        let pool = pool(4);
        let s = pool.acquire(MIN_MEM_SIZE).unwrap();
        assert_eq!(pool.stats().created, 1);
        pool.release(s, ReleaseMode::SyncClean);
        let s = pool.acquire(MIN_MEM_SIZE).unwrap();
        assert_eq!(pool.stats().reused, 1);
        assert!(s.memory().is_zeroed());
        assert_eq!(s.generation(), 1);
        pool.release(s, ReleaseMode::SyncClean);
        accounting_holds(&pool);
    }

    #[test]
    fn sync_release_zeroes() {
        let pool = pool(4);
        let s = dirty(&pool);
        pool.release(s, ReleaseMode::SyncClean);
        pool.inspect_clean(|s| assert!(s.memory().is_zeroed()));
    }

    #[test]
    fn capacity_destroys_overflow() {
        let pool = pool(2);
        let shells: Vec<_> = (0..3).map(|_| pool.acquire(MIN_MEM_SIZE).unwrap()).collect();
        for s in shells {
            pool.release(s, ReleaseMode::SyncClean);
        }
        let st = pool.stats();
        assert_eq!((st.clean, st.destroyed), (2, 1));
        accounting_holds(&pool);
    }

    #[test]
    fn async_release_then_immediate_acquire_is_clean() {
        let pool = pool(4);
        for _ in 0..50 {
            let s = dirty(&pool);
            pool.release(s, ReleaseMode::AsyncClean);
            let s = pool.acquire(MIN_MEM_SIZE).unwrap();
            assert!(s.memory().is_zeroed());
            assert_eq!(s.state(), ShellState::Clean);
            pool.release(s, ReleaseMode::AsyncClean);
        }
        pool.wait_idle();
        let st = pool.stats();
        assert_eq!(st.created, 1);
        assert_eq!(st.cleaned_sync + st.cleaned_async, 100);
        accounting_holds(&pool);
    }

    #[test]
    fn sizes_are_bucketed() {
        let pool = pool(4);
        let s = pool.acquire(MIN_MEM_SIZE).unwrap();
        pool.release(s, ReleaseMode::SyncClean);
        let big = pool.acquire(2 * MIN_MEM_SIZE).unwrap();
        assert_eq!(big.mem_size(), 2 * MIN_MEM_SIZE);
        assert_eq!(pool.stats().created, 2);
        pool.release(big, ReleaseMode::SyncClean);
    }

    #[test]
    fn state_machine() {
        let pool = pool(1);
        let mut s = pool.acquire(MIN_MEM_SIZE).unwrap();
        assert!(s.enter().is_err());
        assert!(s.run(None).is_err());
        let image = MockBackend::image("hlt", ProcessorMode::Long64, MIN_MEM_SIZE);
        s.load(&image).unwrap();
        assert!(s.load(&image).is_err());
        s.write_args(b"abc").unwrap();
        s.enter().unwrap();
        assert_eq!(s.run(None).unwrap(), VcpuExit::Halt);
        s.finish();
        assert_eq!(s.state(), ShellState::Dirty);
        s.clean();
        assert_eq!(s.state(), ShellState::Clean);
        assert!(s.memory().is_zeroed());
        pool.release(s, ReleaseMode::SyncClean);
    }

    #[test]
    fn load_rejects_wrong_size() {
        let pool = pool(1);
        let mut s = pool.acquire(MIN_MEM_SIZE).unwrap();
        let image = MockBackend::image("hlt", ProcessorMode::Long64, 2 * MIN_MEM_SIZE);
        assert!(matches!(s.load(&image), Err(ShellError::SizeMismatch { .. })));
        pool.release(s, ReleaseMode::SyncClean);
    }

    #[test]
    fn live_shells_are_disjoint() {
        let pool = pool(4);
        let a = pool.acquire(MIN_MEM_SIZE).unwrap();
        let b = pool.acquire(MIN_MEM_SIZE).unwrap();
        assert!(disjoint(&a, &b));
        pool.release(a, ReleaseMode::SyncClean);
        pool.release(b, ReleaseMode::SyncClean);
    }

    #[test]
    fn drop_drains_cleaner() {
        let mock = MockBackend::new();
        let pool = Pool::new(Arc::new(mock), 8);
        for _ in 0..8 {
            let s = dirty(&pool);
            pool.release(s, ReleaseMode::AsyncClean);
        }
        drop(pool);
    }

    /// Contexts whose reset always fails.
    #[derive(Debug)]
    struct Poisoning(MockBackend);

    struct PoisonedCtx(Box<dyn Context>);

    impl Context for PoisonedCtx {
        fn memory(&self) -> &GuestMemory {
            self.0.memory()
        }
        fn memory_mut(&mut self) -> &mut GuestMemory {
            self.0.memory_mut()
        }
        fn registers(&mut self) -> Result<RegisterFile, BackendError> {
            self.0.registers()
        }
        fn set_registers(&mut self, regs: &RegisterFile) {
            self.0.set_registers(regs)
        }
        fn run(&mut self, deadline: Option<Instant>) -> Result<VcpuExit, BackendError> {
            self.0.run(deadline)
        }
        fn poisoned(&self) -> bool {
            true
        }
    }

    impl Backend for Poisoning {
        fn kind(&self) -> crate::backend::BackendKind {
            self.0.kind()
        }
        fn create_context(&self, mem_size: usize) -> Result<Box<dyn Context>, BackendError> {
            Ok(Box::new(PoisonedCtx(self.0.create_context(mem_size)?)))
        }
    }

    #[test]
    fn poisoned_shells_are_never_reused() {
        let pool = Pool::new(Arc::new(Poisoning(MockBackend::new())), 4);
        let a = dirty(&pool);
        pool.release(a, ReleaseMode::SyncClean);
        let b = dirty(&pool);
        pool.release(b, ReleaseMode::AsyncClean);
        pool.wait_idle();
        let s = pool.stats();
        assert_eq!((s.created, s.reused, s.destroyed, s.clean), (2, 0, 2, 0), "{s:?}");
        accounting_holds(&pool);
        // A dirty shell stolen by acquire is replaced, not handed out.
        let c = dirty(&pool);
        {
            let mut st = pool.inner.lock();
            st.stats.in_flight -= 1;
            st.stats.dirty += 1;
            st.dirty.push_back(c);
        }
        let d = pool.acquire(MIN_MEM_SIZE).unwrap();
        assert!(d.memory().is_zeroed());
        let s = pool.stats();
        assert_eq!((s.created, s.reused, s.destroyed), (4, 0, 3), "{s:?}");
        pool.release(d, ReleaseMode::SyncClean);
        accounting_holds(&pool);
    }
}
