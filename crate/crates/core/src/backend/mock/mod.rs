// SPDX-License-Identifier: Apache-2.0

//! Deterministic mock backend.
//!
//! The mock does not emulate instructions. A guest image for the mock starts
//! with a tag naming a registered [`GuestProgram`]; each [`Context::run`] looks
//! the program up by the tag found at the image base and asks it for the next
//! exit. Programs keep all of their state in the register file and guest
//! memory, so clean, snapshot and restore behave exactly as they would for a
//! real guest.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use super::{Backend, BackendError, BackendKind, Context, GuestMemory, RegisterFile, VcpuExit};
use crate::hypercall::{frame, HypercallNr, HYPERCALL_PORT};
use crate::image::VirtineImage;
use crate::platform::{ProcessorMode, IMAGE_BASE};

pub mod programs;

pub const MOCK_MAGIC: [u8; 8] = *b"VTMOCK\0\0";
/// Tag length: magic plus a NUL-padded program name.
pub const MOCK_TAG_LEN: usize = 32;
const MAX_NAME: usize = MOCK_TAG_LEN - MOCK_MAGIC.len();

/// Scratch frame location used by the builtin programs.
pub const SCRATCH_FRAME: u64 = 0x7f00;
pub const SCRATCH_DATA: u64 = 0x7f40;

/// A scripted guest. Implementations must be stateless: everything that
/// changes between steps lives in `cpu`.
pub trait GuestProgram: Send + Sync {
    /// Advances the guest. `None` means it kept executing without exiting.
    fn step(&self, cpu: &mut MockCpu<'_>) -> Option<VcpuExit>;
}

impl<F> GuestProgram for F
where
    F: Fn(&mut MockCpu<'_>) -> Option<VcpuExit> + Send + Sync,
{
    fn step(&self, cpu: &mut MockCpu<'_>) -> Option<VcpuExit> {
        self(cpu)
    }
}

/// The view a mock program has of its virtual machine.
pub struct MockCpu<'a> {
    pub regs: &'a mut RegisterFile,
    pub mem: &'a mut GuestMemory,
}

impl MockCpu<'_> {
    /// Program position, relative to the image base.
    pub fn label(&self) -> u64 {
        self.regs.rip.wrapping_sub(IMAGE_BASE)
    }

    pub fn goto(&mut self, label: u64) {
        self.regs.rip = IMAGE_BASE.wrapping_add(label);
    }

    /// Writes a hypercall frame at [`SCRATCH_FRAME`] and returns the exit the
    /// hardware would produce for `out %eax, $0xff`.
    pub fn hypercall(&mut self, nr: HypercallNr, args: &[u64]) -> VcpuExit {
        self.hypercall_raw(nr as u64, args)
    }

    pub fn hypercall_raw(&mut self, nr: u64, args: &[u64]) -> VcpuExit {
        let mut bytes = [0u8; frame::SIZE];
        bytes[..8].copy_from_slice(&nr.to_le_bytes());
        for (i, a) in args.iter().take(frame::ARG_COUNT).enumerate() {
            let off = frame::ARGS_OFFSET + 8 * i;
            bytes[off..off + 8].copy_from_slice(&a.to_le_bytes());
        }
        // A program too small to hold the scratch frame simply faults.
        if self.mem.write(SCRATCH_FRAME, &bytes).is_err() {
            return VcpuExit::Fault("scratch frame outside guest memory".into());
        }
        VcpuExit::IoOut {
            port: HYPERCALL_PORT,
            width: 4,
            value: SCRATCH_FRAME as u32,
        }
    }

    /// Return value the host stored in the scratch frame.
    pub fn ret(&self) -> i64 {
        self.mem
            .read_u64(SCRATCH_FRAME + frame::RET_OFFSET as u64)
            .map(|v| v as i64)
            .unwrap_or(i64::MIN)
    }
}

/// One step of a [`Script`]: optional memory writes, then an exit.
#[derive(Clone, Debug)]
pub struct ScriptStep {
    pub writes: Vec<(u64, Vec<u8>)>,
    pub exit: VcpuExit,
}

impl From<VcpuExit> for ScriptStep {
    fn from(exit: VcpuExit) -> Self {
        ScriptStep {
            writes: Vec::new(),
            exit,
        }
    }
}

/// Replays a fixed exit sequence. The position is kept in `rip`, one unit per
/// step; running past the end yields [`VcpuExit::Shutdown`].
#[derive(Clone, Debug)]
pub struct Script(pub Vec<ScriptStep>);

impl GuestProgram for Script {
    fn step(&self, cpu: &mut MockCpu<'_>) -> Option<VcpuExit> {
        let idx = cpu.label();
        let Some(step) = usize::try_from(idx).ok().and_then(|i| self.0.get(i)) else {
            return Some(VcpuExit::Shutdown);
        };
        for (gpa, bytes) in &step.writes {
            if cpu.mem.write(*gpa, bytes).is_err() {
                return Some(VcpuExit::Fault(format!("script write at {gpa:#x} out of bounds")));
            }
        }
        cpu.goto(idx + 1);
        Some(step.exit.clone())
    }
}

type Registry = RwLock<HashMap<String, Arc<dyn GuestProgram>>>;

/// Factory for mock contexts. Cloning shares the program registry.
#[derive(Clone)]
pub struct MockBackend {
    programs: Arc<Registry>,
    created: Arc<AtomicU64>,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<String> = self.programs.read().unwrap().keys().cloned().collect();
        f.debug_struct("MockBackend").field("programs", &names).finish()
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    /// A mock with the builtin programs from [`programs`] registered.
    pub fn new() -> Self {
        let mock = Self::empty();
        programs::register_builtins(&mock);
        mock
    }

    pub fn empty() -> Self {
        MockBackend {
            programs: Arc::new(RwLock::new(HashMap::new())),
            created: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Registers (or replaces) a program under `name`.
    ///
    /// # Panics
    /// If `name` is longer than fits in a tag.
    pub fn register(&self, name: &str, program: impl GuestProgram + 'static) {
        assert!(name.len() <= MAX_NAME, "mock program name too long: {name}");
        self.programs
            .write()
            .unwrap()
            .insert(name.to_owned(), Arc::new(program));
    }

    pub fn register_script(&self, name: &str, steps: Vec<ScriptStep>) {
        self.register(name, Script(steps));
    }

    /// Number of contexts created so far.
    pub fn contexts_created(&self) -> u64 {
        self.created.load(Ordering::Relaxed)
    }

    /// Image bytes selecting program `name`.
    pub fn code(name: &str) -> Vec<u8> {
        assert!(name.len() <= MAX_NAME, "mock program name too long: {name}");
        let mut code = vec![0u8; MOCK_TAG_LEN];
        code[..MOCK_MAGIC.len()].copy_from_slice(&MOCK_MAGIC);
        code[MOCK_MAGIC.len()..MOCK_MAGIC.len() + name.len()].copy_from_slice(name.as_bytes());
        code
    }

    /// A [`VirtineImage`] that runs program `name` on this backend.
    pub fn image(name: &str, mode: ProcessorMode, mem_size: usize) -> VirtineImage {
        VirtineImage::new(name, Self::code(name), mode, mem_size)
            .expect("mock image parameters are valid")
    }

    fn lookup(&self, mem: &GuestMemory) -> Option<Arc<dyn GuestProgram>> {
        let tag = mem.slice(IMAGE_BASE, MOCK_TAG_LEN).ok()?;
        if tag[..MOCK_MAGIC.len()] != MOCK_MAGIC {
            return None;
        }
        let name = &tag[MOCK_MAGIC.len()..];
        let end = name.iter().position(|&b| b == 0).unwrap_or(name.len());
        let name = std::str::from_utf8(&name[..end]).ok()?;
        self.programs.read().unwrap().get(name).cloned()
    }
}

impl Backend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn create_context(&self, mem_size: usize) -> Result<Box<dyn Context>, BackendError> {
        let memory = GuestMemory::new(mem_size)?;
        self.created.fetch_add(1, Ordering::Relaxed);
        Ok(Box::new(MockContext {
            backend: self.clone(),
            memory,
            regs: RegisterFile::power_on(),
        }))
    }
}

pub struct MockContext {
    backend: MockBackend,
    memory: GuestMemory,
    regs: RegisterFile,
}

impl Context for MockContext {
    fn memory(&self) -> &GuestMemory {
        &self.memory
    }

    fn memory_mut(&mut self) -> &mut GuestMemory {
        &mut self.memory
    }

    fn registers(&mut self) -> Result<RegisterFile, BackendError> {
        Ok(self.regs)
    }

    fn set_registers(&mut self, regs: &RegisterFile) {
        self.regs = *regs;
    }

    fn run(&mut self, deadline: Option<Instant>) -> Result<VcpuExit, BackendError> {
        let mut spins = 0u32;
        loop {
            let Some(program) = self.backend.lookup(&self.memory) else {
                return Ok(VcpuExit::Fault(format!(
                    "no mock program at {IMAGE_BASE:#x} (rip {:#x})",
                    self.regs.rip
                )));
            };
            let mut cpu = MockCpu {
                regs: &mut self.regs,
                mem: &mut self.memory,
            };
            if let Some(exit) = program.step(&mut cpu) {
                return Ok(exit);
            }
            spins = spins.wrapping_add(1);
            if spins % 64 == 0 {
                if let Some(deadline) = deadline {
                    if Instant::now() >= deadline {
                        return Err(BackendError::TimedOut);
                    }
                }
            }
        }
    }
}
