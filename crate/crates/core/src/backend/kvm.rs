// SPDX-License-Identifier: Apache-2.0

//! Hardware backend on Linux KVM.
//!
//! Each context is one VM with a single memory slot at guest-physical 0 and a
//! single vCPU. Deadlines are enforced with a per-thread POSIX timer that
//! signals the running thread, which makes `KVM_RUN` return `EINTR`.

use std::cell::{OnceCell, RefCell};
use std::sync::{Arc, Once, OnceLock};
use std::time::Instant;

use kvm_bindings::{
    kvm_debugregs, kvm_fpu, kvm_msr_entry, kvm_regs, kvm_segment, kvm_sregs, kvm_userspace_memory_region,
    kvm_vcpu_events, CpuId, Msrs, KVM_MAX_CPUID_ENTRIES,
};
use kvm_ioctls::{Kvm, SyncReg, VcpuExit as KvmExit, VcpuFd, VmFd};
use log::debug;

use super::{Backend, BackendError, BackendKind, Context, GuestMemory, RegisterFile, Segment, VcpuExit};
use crate::backend::regs::access;

/// The only KVM API version ever released as stable.
pub const KVM_API_VERSION: i32 = 12;

/// Overrides the device node opened by [`KvmBackend::open`].
pub const KVM_DEVICE_ENV: &str = "VIRTINE_KVM_DEVICE";
pub const DEFAULT_KVM_DEVICE: &str = "/dev/kvm";

/// Placed above any supported guest memory size.
const TSS_ADDRESS: usize = 0xfffb_d000;

const DRAIN_PASSES: usize = 8;

/// Guest-writable MSRs outside the segment and control registers,
/// restored on every reset: SYSENTER_CS/ESP/EIP, PAT, STAR, LSTAR, CSTAR,
/// SFMASK, KERNEL_GS_BASE, TSC_AUX.
const SCRUBBED_MSRS: [u32; 10] = [
    0x174, 0x175, 0x176, 0x277, 0xc000_0081, 0xc000_0082, 0xc000_0083, 0xc000_0084, 0xc000_0102,
    0xc000_0103,
];

pub struct KvmBackend {
    kvm: Kvm,
    cpuid: CpuId,
    /// Registers, system registers and events travel through `kvm_run`.
    sync_regs: bool,
    /// Creation-time vCPU state, the same for every context: read back
    /// from the first vCPU instead of from each one.
    template: OnceLock<Arc<Template>>,
}

struct Template {
    base_sregs: kvm_sregs,
    regs: RegisterFile,
    pristine: Pristine,
}

/// `KVM_SYNC_X86_REGS | KVM_SYNC_X86_SREGS | KVM_SYNC_X86_EVENTS`.
const SYNC_ALL: i32 = 0x7;

impl std::fmt::Debug for KvmBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KvmBackend").finish_non_exhaustive()
    }
}

fn host_err(what: &str, e: impl std::fmt::Display) -> BackendError {
    BackendError::Host(format!("{what}: {e}"))
}

impl KvmBackend {
    /// Opens `/dev/kvm` and checks the API version.
    pub fn open() -> Result<Self, BackendError> {
        let path = std::env::var(KVM_DEVICE_ENV).unwrap_or_else(|_| DEFAULT_KVM_DEVICE.to_owned());
        let cpath = std::ffi::CString::new(path.clone())
            .map_err(|_| BackendError::VirtualizationUnavailable(format!("bad device path {path:?}")))?;
        let kvm = Kvm::new_with_path(&cpath)
            .map_err(|e| BackendError::VirtualizationUnavailable(format!("{path}: {e}")))?;
        let version = kvm.get_api_version();
        if version != KVM_API_VERSION {
            return Err(BackendError::VirtualizationUnavailable(format!(
                "KVM API version {version}, need {KVM_API_VERSION}"
            )));
        }
        let cpuid = kvm
            .get_supported_cpuid(KVM_MAX_CPUID_ENTRIES)
            .map_err(|e| BackendError::VirtualizationUnavailable(format!("cpuid: {e}")))?;
        let sync_regs = kvm.check_extension_int(kvm_ioctls::Cap::SyncRegs) & SYNC_ALL == SYNC_ALL;
        debug!("KVM_CAP_SYNC_REGS: {sync_regs}");
        Ok(KvmBackend {
            kvm,
            cpuid,
            sync_regs,
            template: OnceLock::new(),
        })
    }
}

impl Backend for KvmBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Hardware
    }

    fn create_context(&self, mem_size: usize) -> Result<Box<dyn Context>, BackendError> {
        let memory = GuestMemory::new(mem_size)?;
        let vm = self
            .kvm
            .create_vm()
            .map_err(|e| BackendError::AllocationFailure(format!("KVM_CREATE_VM: {e}")))?;
        vm.set_tss_address(TSS_ADDRESS)
            .map_err(|e| host_err("KVM_SET_TSS_ADDR", e))?;
        let region = kvm_userspace_memory_region {
            slot: 0,
            flags: 0,
            guest_phys_addr: 0,
            memory_size: mem_size as u64,
            userspace_addr: memory.host_base(),
        };
        // SAFETY: the region stays mapped until after the VM fd is closed
        // (field order in `KvmContext`).
        unsafe { vm.set_user_memory_region(region) }
            .map_err(|e| host_err("KVM_SET_USER_MEMORY_REGION", e))?;
        let mut vcpu = vm
            .create_vcpu(0)
            .map_err(|e| BackendError::AllocationFailure(format!("KVM_CREATE_VCPU: {e}")))?;
        vcpu.set_cpuid2(&self.cpuid)
            .map_err(|e| host_err("KVM_SET_CPUID2", e))?;
        let template = match self.template.get() {
            Some(t) => Arc::clone(t),
            None => {
                let base_sregs = vcpu.get_sregs().map_err(|e| host_err("KVM_GET_SREGS", e))?;
                let regs = vcpu.get_regs().map_err(|e| host_err("KVM_GET_REGS", e))?;
                let t = Arc::new(Template {
                    base_sregs,
                    regs: regs_from_kvm(&regs, &base_sregs),
                    pristine: Pristine::capture(&vcpu)?,
                });
                Arc::clone(self.template.get_or_init(|| t))
            }
        };
        if self.sync_regs {
            vcpu.set_sync_valid_reg(SyncReg::Register);
            vcpu.set_sync_valid_reg(SyncReg::SystemRegister);
            vcpu.set_sync_valid_reg(SyncReg::VcpuEvents);
        }
        let ctx = KvmContext {
            vcpu,
            _vm: vm,
            memory,
            regs: template.regs,
            base_sregs: template.base_sregs,
            needs_push: true,
            stale: false,
            io_pending: false,
            pristine: template,
            ran: false,
            poisoned: false,
            sync_regs: self.sync_regs,
            synced: false,
            tsc_offset: OnceCell::new(),
        };
        Ok(Box::new(ctx))
    }
}

// Field order matters: the vCPU and VM must be closed before the memory
// backing their slot is unmapped.
pub struct KvmContext {
    vcpu: VcpuFd,
    _vm: VmFd,
    memory: GuestMemory,
    regs: RegisterFile,
    base_sregs: kvm_sregs,
    needs_push: bool,
    stale: bool,
    /// Last exit left an I/O or MMIO instruction for KVM to finish on the
    /// next `KVM_RUN`.
    io_pending: bool,
    pristine: Arc<Template>,
    /// Guest code has run since the last scrub.
    ran: bool,
    /// Set when an exit or a failed scrub leaves the vCPU in a state reset
    /// cannot vouch for.
    poisoned: bool,
    sync_regs: bool,
    /// `kvm_run` holds the state KVM stored at the last completed exit.
    synced: bool,
    tsc_offset: OnceCell<Option<i64>>,
}

/// vCPU state outside [`RegisterFile`] as it was at creation: pending
/// events, FPU/SSE registers, debug registers and [`SCRUBBED_MSRS`].
/// The TSC is left running.
struct Pristine {
    events: kvm_vcpu_events,
    fpu: kvm_fpu,
    debugregs: kvm_debugregs,
    msrs: Msrs,
}

impl Pristine {
    fn capture(vcpu: &VcpuFd) -> Result<Self, BackendError> {
        let entries: Vec<kvm_msr_entry> = SCRUBBED_MSRS
            .iter()
            .map(|&index| kvm_msr_entry {
                index,
                ..Default::default()
            })
            .collect();
        let mut msrs = Msrs::from_entries(&entries).map_err(|e| host_err("Msrs", format!("{e:?}")))?;
        // Keep only the MSRs this host lets us read back.
        let n = vcpu.get_msrs(&mut msrs).map_err(|e| host_err("KVM_GET_MSRS", e))?;
        let msrs = Msrs::from_entries(&msrs.as_slice()[..n]).map_err(|e| host_err("Msrs", format!("{e:?}")))?;
        Ok(Pristine {
            events: vcpu.get_vcpu_events().map_err(|e| host_err("KVM_GET_VCPU_EVENTS", e))?,
            fpu: vcpu.get_fpu().map_err(|e| host_err("KVM_GET_FPU", e))?,
            debugregs: vcpu.get_debug_regs().map_err(|e| host_err("KVM_GET_DEBUGREGS", e))?,
            msrs,
        })
    }

    /// With `sync`, events are queued in `kvm_run` for the next entry.
    fn restore(&self, vcpu: &mut VcpuFd, sync: bool) -> Result<(), BackendError> {
        if sync {
            vcpu.sync_regs_mut().events = self.events;
            vcpu.set_sync_dirty_reg(SyncReg::VcpuEvents);
        } else {
            vcpu.set_vcpu_events(&self.events)
                .map_err(|e| host_err("KVM_SET_VCPU_EVENTS", e))?;
        }
        vcpu.set_fpu(&self.fpu).map_err(|e| host_err("KVM_SET_FPU", e))?;
        vcpu.set_debug_regs(&self.debugregs)
            .map_err(|e| host_err("KVM_SET_DEBUGREGS", e))?;
        vcpu.set_msrs(&self.msrs).map_err(|e| host_err("KVM_SET_MSRS", e))?;
        Ok(())
    }
}

impl KvmContext {
    /// Lets KVM finish a pending I/O instruction against the current vCPU
    /// state, without running any further guest code.
    ///
    /// A string instruction exits once per element, so this may take several
    /// passes; gives up after [`DRAIN_PASSES`].
    fn drain_pending_io(&mut self) -> Result<(), BackendError> {
        self.vcpu.set_kvm_immediate_exit(1);
        let mut result = Err(libc::EAGAIN);
        for _ in 0..DRAIN_PASSES {
            result = self.vcpu.run().map(|_| ()).map_err(|e| e.errno());
            if result.is_err() {
                break;
            }
            debug!("immediate-exit run returned an exit");
        }
        self.vcpu.set_kvm_immediate_exit(0);
        self.stale = true;
        self.synced = false;
        match result {
            Err(libc::EINTR) => {
                self.io_pending = false;
                Ok(())
            }
            Ok(()) => Err(BackendError::Host("pending I/O did not complete".into())),
            Err(errno) => Err(host_err("KVM_RUN(immediate_exit)", std::io::Error::from_raw_os_error(errno))),
        }
    }

    fn push(&mut self) -> Result<(), BackendError> {
        if !self.needs_push {
            return Ok(());
        }
        self.regs
            .check_consistency()
            .map_err(BackendError::InvalidRegisters)?;
        let (regs, sregs) = regs_to_kvm(&self.regs, &self.base_sregs);
        if self.sync_regs {
            // Applied by KVM at the next entry, ahead of any I/O completion.
            let shared = self.vcpu.sync_regs_mut();
            shared.regs = regs;
            shared.sregs = sregs;
            self.vcpu.set_sync_dirty_reg(SyncReg::Register);
            self.vcpu.set_sync_dirty_reg(SyncReg::SystemRegister);
        } else {
            self.vcpu
                .set_sregs(&sregs)
                .map_err(|e| host_err("KVM_SET_SREGS", e))?;
            self.vcpu
                .set_regs(&regs)
                .map_err(|e| host_err("KVM_SET_REGS", e))?;
        }
        self.needs_push = false;
        Ok(())
    }
}

impl Context for KvmContext {
    fn memory(&self) -> &GuestMemory {
        &self.memory
    }

    fn memory_mut(&mut self) -> &mut GuestMemory {
        &mut self.memory
    }

    fn registers(&mut self) -> Result<RegisterFile, BackendError> {
        if self.stale {
            self.regs = if self.synced {
                let shared = self.vcpu.sync_regs();
                regs_from_kvm(&shared.regs, &shared.sregs)
            } else {
                let regs = self.vcpu.get_regs().map_err(|e| host_err("KVM_GET_REGS", e))?;
                let sregs = self.vcpu.get_sregs().map_err(|e| host_err("KVM_GET_SREGS", e))?;
                regs_from_kvm(&regs, &sregs)
            };
            self.stale = false;
        }
        Ok(self.regs)
    }

    fn set_registers(&mut self, regs: &RegisterFile) {
        self.regs = *regs;
        self.needs_push = true;
        self.stale = false;
    }

    fn run(&mut self, deadline: Option<Instant>) -> Result<VcpuExit, BackendError> {
        self.push()?;
        let _watchdog = deadline.map(watchdog::arm);
        loop {
            self.ran = true;
            let result = self.vcpu.run();
            self.stale = true;
            self.synced = self.sync_regs && result.is_ok();
            self.io_pending = matches!(
                result,
                Ok(KvmExit::IoOut(..) | KvmExit::IoIn(..) | KvmExit::MmioRead(..) | KvmExit::MmioWrite(..))
            );
            let exit = match result {
                Ok(KvmExit::Hlt) => VcpuExit::Halt,
                Ok(KvmExit::IoOut(port, data)) => {
                    let mut value = [0u8; 4];
                    let n = data.len().min(4);
                    value[..n].copy_from_slice(&data[..n]);
                    VcpuExit::IoOut {
                        port,
                        width: data.len() as u8,
                        value: u32::from_le_bytes(value),
                    }
                }
                Ok(KvmExit::IoIn(port, data)) => {
                    data.fill(0);
                    VcpuExit::IoIn {
                        port,
                        width: data.len() as u8,
                    }
                }
                Ok(KvmExit::MmioRead(addr, _)) | Ok(KvmExit::MmioWrite(addr, _)) => {
                    VcpuExit::Fault(format!("access outside guest memory at {addr:#x}"))
                }
                Ok(KvmExit::Shutdown) => VcpuExit::Shutdown,
                Ok(KvmExit::FailEntry(reason, _)) => {
                    self.poisoned = true;
                    VcpuExit::Fault(format!("vm entry failed, hardware reason {reason:#x}"))
                }
                Ok(KvmExit::Intr) => {
                    if deadline.is_some_and(|d| Instant::now() >= d) {
                        return Err(BackendError::TimedOut);
                    }
                    continue;
                }
                Ok(other) => {
                    self.poisoned = true;
                    VcpuExit::Fault(format!("unhandled exit {other:?}"))
                }
                Err(e) if e.errno() == libc::EINTR || e.errno() == libc::EAGAIN => {
                    if deadline.is_some_and(|d| Instant::now() >= d) {
                        return Err(BackendError::TimedOut);
                    }
                    continue;
                }
                Err(e) => return Err(host_err("KVM_RUN", e)),
            };
            return Ok(exit);
        }
    }

    fn complete_pending_io(&mut self) -> Result<(), BackendError> {
        self.push()?;
        self.drain_pending_io()
    }

    fn reset(&mut self) {
        // A faulting MMIO access would otherwise be replayed against the
        // next guest's state.
        if self.io_pending {
            if let Err(e) = self.drain_pending_io() {
                debug!("discarding pending I/O failed: {e}");
                self.poisoned = true;
            }
        }
        if self.ran {
            if let Err(e) = self.pristine.pristine.restore(&mut self.vcpu, self.sync_regs) {
                debug!("restoring pristine vcpu state failed: {e}");
                self.poisoned = true;
            }
            self.ran = false;
        }
        self.memory.zero();
        self.set_registers(&RegisterFile::power_on());
    }

    fn poisoned(&self) -> bool {
        self.poisoned
    }

    fn tsc_offset(&self) -> Option<i64> {
        *self.tsc_offset.get_or_init(|| measure_tsc_offset(&self.vcpu))
    }
}

const IA32_TSC: u32 = 0x10;

/// Reads the guest TSC between two host reads and keeps the tightest of a
/// few attempts.
fn measure_tsc_offset(vcpu: &VcpuFd) -> Option<i64> {
    let mut best: Option<(u64, i64)> = None;
    for _ in 0..8 {
        let mut msrs = Msrs::from_entries(&[kvm_msr_entry {
            index: IA32_TSC,
            ..Default::default()
        }])
        .ok()?;
        let h0 = crate::clock::cycles();
        let n = vcpu.get_msrs(&mut msrs).ok()?;
        let h1 = crate::clock::cycles();
        if n != 1 {
            return None;
        }
        let guest = msrs.as_slice()[0].data;
        let width = h1 - h0;
        let offset = guest.wrapping_sub(h0 + width / 2) as i64;
        if best.is_none_or(|(w, _)| width < w) {
            best = Some((width, offset));
        }
    }
    best.map(|(_, off)| off)
}

fn seg_to_kvm(seg: &Segment) -> kvm_segment {
    kvm_segment {
        base: seg.base,
        limit: seg.limit,
        selector: seg.selector,
        type_: seg.seg_type(),
        present: seg.present() as u8,
        dpl: seg.dpl(),
        db: seg.default_big() as u8,
        s: (!seg.system()) as u8,
        l: seg.long() as u8,
        g: seg.granular() as u8,
        avl: seg.avl() as u8,
        unusable: (!seg.present()) as u8,
        padding: 0,
    }
}

fn seg_from_kvm(seg: &kvm_segment) -> Segment {
    let mut acc = u16::from(seg.type_) & access::TYPE_MASK;
    if seg.s != 0 {
        acc |= access::S;
    }
    acc |= (u16::from(seg.dpl) & 3) << access::DPL_SHIFT;
    if seg.present != 0 {
        acc |= access::P;
    }
    if seg.avl != 0 {
        acc |= access::AVL;
    }
    if seg.l != 0 {
        acc |= access::L;
    }
    if seg.db != 0 {
        acc |= access::DB;
    }
    if seg.g != 0 {
        acc |= access::G;
    }
    Segment {
        selector: seg.selector,
        base: seg.base,
        limit: seg.limit,
        access: acc,
    }
}

fn regs_to_kvm(r: &RegisterFile, base: &kvm_sregs) -> (kvm_regs, kvm_sregs) {
    let g = &r.gpr;
    let regs = kvm_regs {
        rax: g[0],
        rcx: g[1],
        rdx: g[2],
        rbx: g[3],
        rsp: g[4],
        rbp: g[5],
        rsi: g[6],
        rdi: g[7],
        r8: g[8],
        r9: g[9],
        r10: g[10],
        r11: g[11],
        r12: g[12],
        r13: g[13],
        r14: g[14],
        r15: g[15],
        rip: r.rip,
        rflags: r.rflags,
    };
    let mut sregs = *base;
    sregs.cs = seg_to_kvm(&r.cs);
    sregs.ds = seg_to_kvm(&r.ds);
    sregs.es = seg_to_kvm(&r.es);
    sregs.ss = seg_to_kvm(&r.ss);
    sregs.fs = sregs.ds;
    sregs.gs = sregs.ds;
    sregs.cr0 = r.cr0;
    sregs.cr3 = r.cr3;
    sregs.cr4 = r.cr4;
    sregs.efer = r.efer;
    sregs.gdt.base = r.gdt.base;
    sregs.gdt.limit = r.gdt.limit;
    (regs, sregs)
}

fn regs_from_kvm(regs: &kvm_regs, sregs: &kvm_sregs) -> RegisterFile {
    RegisterFile {
        gpr: [
            regs.rax, regs.rcx, regs.rdx, regs.rbx, regs.rsp, regs.rbp, regs.rsi, regs.rdi, regs.r8,
            regs.r9, regs.r10, regs.r11, regs.r12, regs.r13, regs.r14, regs.r15,
        ],
        rip: regs.rip,
        rflags: regs.rflags,
        cr0: sregs.cr0,
        cr3: sregs.cr3,
        cr4: sregs.cr4,
        efer: sregs.efer,
        cs: seg_from_kvm(&sregs.cs),
        ds: seg_from_kvm(&sregs.ds),
        es: seg_from_kvm(&sregs.es),
        ss: seg_from_kvm(&sregs.ss),
        gdt: super::DescriptorTable {
            base: sregs.gdt.base,
            limit: sregs.gdt.limit,
        },
    }
}

/// Per-thread deadline timer.
mod watchdog {
    use super::*;

    /// Re-fire period once the deadline has passed, covering a signal that
    /// lands just before the thread enters `KVM_RUN`.
    const REFIRE_NS: i64 = 5_000_000;

    struct Timer(libc::timer_t);

    impl Drop for Timer {
        fn drop(&mut self) {
            // SAFETY: timer created by `timer_create` on this thread.
            unsafe {
                libc::timer_delete(self.0);
            }
        }
    }

    thread_local! {
        static TIMER: RefCell<Option<Timer>> = const { RefCell::new(None) };
    }

    static HANDLER: Once = Once::new();

    fn signal() -> libc::c_int {
        libc::SIGRTMIN() + 2
    }

    extern "C" fn on_signal(_: libc::c_int) {}

    fn install_handler() {
        HANDLER.call_once(|| {
            // SAFETY: installs a handler that does nothing; no SA_RESTART so
            // blocking ioctls return EINTR.
            unsafe {
                let mut sa: libc::sigaction = std::mem::zeroed();
                sa.sa_sigaction = on_signal as *const () as usize;
                sa.sa_flags = 0;
                libc::sigemptyset(&mut sa.sa_mask);
                libc::sigaction(signal(), &sa, std::ptr::null_mut());
            }
        });
    }

    fn create() -> Option<Timer> {
        install_handler();
        // SAFETY: zeroed sigevent is a valid starting point; fields set below.
        unsafe {
            let mut sev: libc::sigevent = std::mem::zeroed();
            sev.sigev_notify = libc::SIGEV_THREAD_ID;
            sev.sigev_signo = signal();
            sev.sigev_notify_thread_id = libc::gettid();
            let mut id: libc::timer_t = std::mem::zeroed();
            if libc::timer_create(libc::CLOCK_MONOTONIC, &mut sev, &mut id) != 0 {
                return None;
            }
            Some(Timer(id))
        }
    }

    fn settime(value_ns: i64, interval_ns: i64) {
        let ts = |ns: i64| libc::timespec {
            tv_sec: ns / 1_000_000_000,
            tv_nsec: ns % 1_000_000_000,
        };
        TIMER.with(|t| {
            let mut slot = t.borrow_mut();
            if slot.is_none() {
                *slot = create();
            }
            if let Some(timer) = slot.as_ref() {
                let spec = libc::itimerspec {
                    it_interval: ts(interval_ns),
                    it_value: ts(value_ns),
                };
                // SAFETY: valid timer id owned by this thread.
                unsafe {
                    libc::timer_settime(timer.0, 0, &spec, std::ptr::null_mut());
                }
            }
        });
    }

    pub struct Armed;

    impl Drop for Armed {
        fn drop(&mut self) {
            settime(0, 0);
        }
    }

    pub fn arm(deadline: Instant) -> Armed {
        let remaining = deadline.saturating_duration_since(Instant::now());
        let ns = i64::try_from(remaining.as_nanos()).unwrap_or(i64::MAX).max(1);
        settime(ns, REFIRE_NS);
        Armed
    }
}
