// SPDX-License-Identifier: Apache-2.0

//! Host-side synthesis of guest machine state.
//!
//! Instead of running a boot sequence inside the guest, the host writes the
//! identity page tables and GDT straight into guest memory and hands the vCPU
//! a register file that is already in the target processor mode.
//!
//! Default layout (guest-physical):
//!
//! ```text
//! 0x0000 - 0x0fff   argument region
//! 0x1000 - 0x3fff   PML4, PDPT, PD (long mode only)
//! 0x4000 - 0x4017   GDT (protected and long mode)
//! 0x8000 - ...      image
//! ...    - top      stack, growing down from the end of memory
//! ```

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::backend::regs::{
    access, CR0_ET, CR0_NE, CR0_PE, CR0_PG, CR4_PAE, EFER_LMA, EFER_LME, RFLAGS_RESERVED,
};
use crate::backend::{DescriptorTable, GuestMemory, MemoryError, RegisterFile, Segment};

/// Load address of every image.
pub const IMAGE_BASE: u64 = 0x8000;
pub const ARG_BASE: u64 = 0x0;
pub const DEFAULT_ARG_LEN: u64 = 0x1000;
pub const DEFAULT_PAGE_TABLE_BASE: u64 = 0x1000;
pub const DEFAULT_GDT_BASE: u64 = 0x4000;

const TABLE_SIZE: u64 = 4096;
/// PML4 + PDPT + PD.
pub const PAGE_TABLE_BYTES: u64 = 3 * TABLE_SIZE;
pub const LARGE_PAGE_SIZE: u64 = 2 << 20;
/// Identity-mapped range: 512 large pages.
pub const IDENTITY_MAP_LIMIT: u64 = 512 * LARGE_PAGE_SIZE;

pub const PTE_PRESENT: u64 = 1 << 0;
pub const PTE_WRITABLE: u64 = 1 << 1;
pub const PTE_LARGE: u64 = 1 << 7;

pub const GDT_ENTRIES: usize = 3;
pub const CODE_SELECTOR: u16 = 0x08;
pub const DATA_SELECTOR: u16 = 0x10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessorMode {
    Real16,
    Protected32,
    Long64,
}

impl ProcessorMode {
    pub const ALL: [ProcessorMode; 3] = [
        ProcessorMode::Real16,
        ProcessorMode::Protected32,
        ProcessorMode::Long64,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProcessorMode::Real16 => "real16",
            ProcessorMode::Protected32 => "protected32",
            ProcessorMode::Long64 => "long64",
        }
    }
}

impl fmt::Display for ProcessorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProcessorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real16" | "real" | "16" => Ok(ProcessorMode::Real16),
            "protected32" | "protected" | "32" => Ok(ProcessorMode::Protected32),
            "long64" | "long" | "64" => Ok(ProcessorMode::Long64),
            _ => Err(format!("unknown processor mode {s:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlatformError {
    #[error("layout overlap: {first} {first_range:#x?} intersects {second} {second_range:#x?}")]
    LayoutOverlap {
        first: &'static str,
        first_range: Range<u64>,
        second: &'static str,
        second_range: Range<u64>,
    },
    #[error("{region} {range:#x?} does not fit in {mem_size:#x} bytes of guest memory")]
    OutOfMemory {
        region: &'static str,
        range: Range<u64>,
        mem_size: u64,
    },
    #[error("{0} requested without the tables it needs")]
    MissingTables(ProcessorMode),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Where each piece of synthesized state lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlatformLayout {
    pub page_table_base: u64,
    pub gdt_base: u64,
    /// Fixed at [`IMAGE_BASE`].
    pub image_base: u64,
    pub image_len: u64,
    pub stack_top: u64,
    pub arg_base: u64,
    pub arg_len: u64,
}

impl PlatformLayout {
    /// Default layout for `mem_size` bytes of memory holding an `image_len`-byte image.
    pub fn new(mem_size: usize, image_len: u64) -> Self {
        PlatformLayout {
            page_table_base: DEFAULT_PAGE_TABLE_BASE,
            gdt_base: DEFAULT_GDT_BASE,
            image_base: IMAGE_BASE,
            image_len,
            stack_top: mem_size as u64,
            arg_base: ARG_BASE,
            arg_len: DEFAULT_ARG_LEN,
        }
    }

    pub fn page_tables(&self) -> Range<u64> {
        self.page_table_base..self.page_table_base + PAGE_TABLE_BYTES
    }

    pub fn gdt(&self) -> Range<u64> {
        self.gdt_base..self.gdt_base + (GDT_ENTRIES * 8) as u64
    }

    pub fn image(&self) -> Range<u64> {
        self.image_base..self.image_base + self.image_len
    }

    pub fn args(&self) -> Range<u64> {
        self.arg_base..self.arg_base + self.arg_len
    }

    /// Checks that `region` fits in memory and avoids the image and argument regions
    /// (plus any `others`).
    fn check_region(
        &self,
        name: &'static str,
        range: Range<u64>,
        mem_size: u64,
        others: &[(&'static str, Range<u64>)],
    ) -> Result<(), PlatformError> {
        if range.end > mem_size {
            return Err(PlatformError::OutOfMemory {
                region: name,
                range,
                mem_size,
            });
        }
        let fixed = [("image", self.image()), ("args", self.args())];
        for (other, other_range) in fixed.iter().chain(others.iter()) {
            if overlaps(&range, other_range) {
                return Err(PlatformError::LayoutOverlap {
                    first: name,
                    first_range: range,
                    second: other,
                    second_range: other_range.clone(),
                });
            }
        }
        Ok(())
    }

    /// Checks every pair of synthesized regions for overlap, and that all of
    /// them fit in `mem_size`.
    pub fn validate(&self, mem_size: usize) -> Result<(), PlatformError> {
        let mem = mem_size as u64;
        let regions = [
            ("page tables", self.page_tables()),
            ("gdt", self.gdt()),
            ("image", self.image()),
            ("args", self.args()),
        ];
        for (i, (name, range)) in regions.iter().enumerate() {
            if range.end > mem {
                return Err(PlatformError::OutOfMemory {
                    region: name,
                    range: range.clone(),
                    mem_size: mem,
                });
            }
            for (other, other_range) in &regions[i + 1..] {
                if overlaps(range, other_range) {
                    return Err(PlatformError::LayoutOverlap {
                        first: name,
                        first_range: range.clone(),
                        second: other,
                        second_range: other_range.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn overlaps(a: &Range<u64>, b: &Range<u64>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Result of building the identity map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentityMap {
    /// Physical address of the PML4, for cr3.
    pub root: u64,
    pub bytes_written: u64,
}

/// Writes PML4 → PDPT → PD with 512 2MiB pages identity-mapping [0, 1GiB).
pub fn build_identity_page_tables(
    mem: &mut GuestMemory,
    layout: &PlatformLayout,
) -> Result<IdentityMap, PlatformError> {
    let base = layout.page_table_base;
    layout.check_region(
        "page tables",
        layout.page_tables(),
        mem.size() as u64,
        &[("gdt", layout.gdt())],
    )?;
    let pml4 = base;
    let pdpt = base + TABLE_SIZE;
    let pd = base + 2 * TABLE_SIZE;

    let mut table = [0u8; TABLE_SIZE as usize];
    table[..8].copy_from_slice(&(pdpt | PTE_PRESENT | PTE_WRITABLE).to_le_bytes());
    mem.write(pml4, &table)?;
    table[..8].copy_from_slice(&(pd | PTE_PRESENT | PTE_WRITABLE).to_le_bytes());
    mem.write(pdpt, &table)?;
    for (i, entry) in table.chunks_exact_mut(8).enumerate() {
        let pte = (i as u64 * LARGE_PAGE_SIZE) | PTE_PRESENT | PTE_WRITABLE | PTE_LARGE;
        entry.copy_from_slice(&pte.to_le_bytes());
    }
    mem.write(pd, &table)?;

    Ok(IdentityMap {
        root: pml4,
        bytes_written: PAGE_TABLE_BYTES,
    })
}

/// Packs a segment descriptor. `flags` is the G/DB/L/AVL nibble.
pub const fn encode_descriptor(base: u32, limit: u32, access_byte: u8, flags: u8) -> u64 {
    let base = base as u64;
    let limit = limit as u64;
    (limit & 0xffff)
        | ((base & 0xff_ffff) << 16)
        | ((access_byte as u64) << 40)
        | (((limit >> 16) & 0xf) << 48)
        | (((flags as u64) & 0xf) << 52)
        | (((base >> 24) & 0xff) << 56)
}

const DESC_FLAG_L: u8 = 0x2;
const DESC_FLAG_DB: u8 = 0x4;
const DESC_FLAG_G: u8 = 0x8;
const CODE_ACCESS: u8 = 0x9b;
const DATA_ACCESS: u8 = 0x93;

fn gdt_entries(mode: ProcessorMode) -> [u64; GDT_ENTRIES] {
    match mode {
        ProcessorMode::Real16 => [
            0,
            encode_descriptor(0, 0xffff, CODE_ACCESS, 0),
            encode_descriptor(0, 0xffff, DATA_ACCESS, 0),
        ],
        ProcessorMode::Protected32 => [
            0,
            encode_descriptor(0, 0xfffff, CODE_ACCESS, DESC_FLAG_G | DESC_FLAG_DB),
            encode_descriptor(0, 0xfffff, DATA_ACCESS, DESC_FLAG_G | DESC_FLAG_DB),
        ],
        ProcessorMode::Long64 => [
            0,
            encode_descriptor(0, 0xfffff, CODE_ACCESS, DESC_FLAG_G | DESC_FLAG_L),
            encode_descriptor(0, 0xfffff, DATA_ACCESS, DESC_FLAG_G | DESC_FLAG_DB),
        ],
    }
}

/// Writes a null, a flat code and a flat data descriptor for `mode`.
pub fn build_gdt(
    mem: &mut GuestMemory,
    layout: &PlatformLayout,
    mode: ProcessorMode,
) -> Result<DescriptorTable, PlatformError> {
    layout.check_region(
        "gdt",
        layout.gdt(),
        mem.size() as u64,
        &[("page tables", layout.page_tables())],
    )?;
    let mut bytes = [0u8; GDT_ENTRIES * 8];
    for (slot, desc) in bytes.chunks_exact_mut(8).zip(gdt_entries(mode)) {
        slot.copy_from_slice(&desc.to_le_bytes());
    }
    mem.write(layout.gdt_base, &bytes)?;
    Ok(DescriptorTable {
        base: layout.gdt_base,
        limit: (bytes.len() - 1) as u16,
    })
}

/// Tables already present in guest memory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuiltTables {
    pub page_table_root: Option<u64>,
    pub gdt: Option<DescriptorTable>,
}

/// Register file that starts executing at the image base in `mode`.
pub fn preset_registers(
    mode: ProcessorMode,
    layout: &PlatformLayout,
    tables: &BuiltTables,
) -> Result<RegisterFile, PlatformError> {
    let mut regs = RegisterFile::power_on();
    regs.rip = layout.image_base;
    regs.set_rsp(layout.stack_top);
    regs.rflags = RFLAGS_RESERVED;

    let flat = |selector: u16, extra: u16, ty: u16| Segment {
        selector,
        base: 0,
        limit: 0xffff_ffff,
        access: access::P | access::S | access::G | ty | extra,
    };

    match mode {
        ProcessorMode::Real16 => {
            let seg = |ty: u16| Segment {
                selector: 0,
                base: 0,
                limit: 0xffff,
                access: access::P | access::S | ty,
            };
            regs.cr0 = CR0_ET;
            regs.cr3 = 0;
            regs.cr4 = 0;
            regs.efer = 0;
            regs.cs = seg(access::TYPE_CODE_RX_ACCESSED);
            regs.ds = seg(access::TYPE_DATA_RW_ACCESSED);
        }
        ProcessorMode::Protected32 => {
            let gdt = tables.gdt.ok_or(PlatformError::MissingTables(mode))?;
            regs.cr0 = CR0_PE | CR0_ET | CR0_NE;
            regs.gdt = gdt;
            regs.cs = flat(CODE_SELECTOR, access::DB, access::TYPE_CODE_RX_ACCESSED);
            regs.ds = flat(DATA_SELECTOR, access::DB, access::TYPE_DATA_RW_ACCESSED);
        }
        ProcessorMode::Long64 => {
            let root = tables
                .page_table_root
                .ok_or(PlatformError::MissingTables(mode))?;
            let gdt = tables.gdt.ok_or(PlatformError::MissingTables(mode))?;
            regs.cr0 = CR0_PE | CR0_ET | CR0_NE | CR0_PG;
            regs.cr3 = root;
            regs.cr4 = CR4_PAE;
            regs.efer = EFER_LME | EFER_LMA;
            regs.gdt = gdt;
            regs.cs = flat(CODE_SELECTOR, access::L, access::TYPE_CODE_RX_ACCESSED);
            regs.ds = flat(DATA_SELECTOR, access::DB, access::TYPE_DATA_RW_ACCESSED);
        }
    }
    regs.es = regs.ds;
    regs.ss = regs.ds;
    Ok(regs)
}

/// Builds whatever `mode` needs and returns the entry register file.
pub fn synthesize(
    mem: &mut GuestMemory,
    layout: &PlatformLayout,
    mode: ProcessorMode,
) -> Result<RegisterFile, PlatformError> {
    layout.validate(mem.size())?;
    let mut tables = BuiltTables::default();
    if mode != ProcessorMode::Real16 {
        tables.gdt = Some(build_gdt(mem, layout, mode)?);
    }
    if mode == ProcessorMode::Long64 {
        tables.page_table_root = Some(build_identity_page_tables(mem, layout)?.root);
    }
    preset_registers(mode, layout, &tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MIN_MEM_SIZE;

    /// Independent descriptor decoder, bit positions from the architecture
    /// manual's segment-descriptor figure.
    struct Decoded {
        base: u32,
        limit: u32,
        present: bool,
        code: bool,
        long: bool,
        db: bool,
        granular: bool,
    }

    fn decode(d: u64) -> Decoded {
        let lo = d as u32;
        let hi = (d >> 32) as u32;
        Decoded {
            base: (lo >> 16) | ((hi & 0xff) << 16) | (hi & 0xff00_0000),
            limit: (lo & 0xffff) | (hi & 0x000f_0000),
            present: hi & (1 << 15) != 0,
            code: hi & (1 << 11) != 0,
            long: hi & (1 << 21) != 0,
            db: hi & (1 << 22) != 0,
            granular: hi & (1 << 23) != 0,
        }
    }

    fn gdt_in_memory(mode: ProcessorMode) -> (GuestMemory, DescriptorTable) {
        let mut mem = GuestMemory::new(MIN_MEM_SIZE).unwrap();
        let layout = PlatformLayout::new(MIN_MEM_SIZE, 16);
        let gdt = build_gdt(&mut mem, &layout, mode).unwrap();
        (mem, gdt)
    }

    fn descriptor(mem: &GuestMemory, gdt: &DescriptorTable, i: u64) -> u64 {
        mem.read_u64(gdt.base + 8 * i).unwrap()
    }

    #[test]
    fn long_mode_gdt() {
        let (mem, gdt) = gdt_in_memory(ProcessorMode::Long64);
        assert_eq!(gdt.limit, 23);
        assert_eq!(descriptor(&mem, &gdt, 0), 0);
        let code = decode(descriptor(&mem, &gdt, 1));
        assert!(code.present && code.code && code.long && !code.db);
        let data = decode(descriptor(&mem, &gdt, 2));
        assert!(data.present && !data.code && !data.long);
    }

    #[test]
    fn protected_mode_gdt_is_flat_4g() {
        let (mem, gdt) = gdt_in_memory(ProcessorMode::Protected32);
        for i in 1..3 {
            let d = decode(descriptor(&mem, &gdt, i));
            assert_eq!(d.base, 0);
            assert_eq!(d.limit, 0xfffff);
            assert!(d.granular && d.db && !d.long);
        }
        // Well-known encodings of flat 32-bit code and data.
        assert_eq!(descriptor(&mem, &gdt, 1), 0x00cf_9b00_0000_ffff);
        assert_eq!(descriptor(&mem, &gdt, 2), 0x00cf_9300_0000_ffff);
    }

    #[test]
    fn page_tables_written_at_root() {
        let mut mem = GuestMemory::new(MIN_MEM_SIZE).unwrap();
        let layout = PlatformLayout::new(MIN_MEM_SIZE, 16);
        let map = build_identity_page_tables(&mut mem, &layout).unwrap();
        assert_eq!(map.root, 0x1000);
        assert_eq!(map.bytes_written, 12 * 1024);
        assert_eq!(mem.read_u64(0x1000).unwrap(), 0x2000 | 3);
        assert_eq!(mem.read_u64(0x2000).unwrap(), 0x3000 | 3);
        assert_eq!(mem.read_u64(0x3000 + 8 * 511).unwrap(), (511 << 21) | 0x83);
    }

    #[test]
    fn tables_refuse_to_overlap_image() {
        let mut mem = GuestMemory::new(MIN_MEM_SIZE).unwrap();
        let mut layout = PlatformLayout::new(MIN_MEM_SIZE, 0x100);
        layout.page_table_base = 0x7000;
        assert!(matches!(
            build_identity_page_tables(&mut mem, &layout),
            Err(PlatformError::LayoutOverlap { second: "image", .. })
        ));
        assert!(mem.is_zeroed());
        let mut layout = PlatformLayout::new(MIN_MEM_SIZE, 0x100);
        layout.gdt_base = 0x8010;
        assert!(build_gdt(&mut mem, &layout, ProcessorMode::Long64).is_err());
        assert!(mem.is_zeroed());
    }

    #[test]
    fn default_layout_is_disjoint() {
        PlatformLayout::new(MIN_MEM_SIZE, 0x8000).validate(MIN_MEM_SIZE).unwrap();
        let too_big = PlatformLayout::new(MIN_MEM_SIZE, 0x8001);
        assert!(matches!(too_big.validate(MIN_MEM_SIZE), Err(PlatformError::OutOfMemory { .. })));
    }

    #[test]
    fn presets() {
        let layout = PlatformLayout::new(MIN_MEM_SIZE, 16);
        let tables = BuiltTables {
            page_table_root: Some(0x1000),
            gdt: Some(DescriptorTable { base: 0x4000, limit: 23 }),
        };
        let long = preset_registers(ProcessorMode::Long64, &layout, &tables).unwrap();
        assert_eq!(long.cr0 & (CR0_PG | CR0_PE), CR0_PG | CR0_PE);
        assert_eq!(long.cr4 & CR4_PAE, CR4_PAE);
        assert_eq!(long.efer & (EFER_LME | EFER_LMA), EFER_LME | EFER_LMA);
        assert_eq!(long.cr3, 0x1000);
        assert!(long.cs.long() && !long.cs.default_big());
        long.check_consistency().unwrap();

        let real = preset_registers(ProcessorMode::Real16, &layout, &BuiltTables::default()).unwrap();
        assert_eq!(real.cr3, 0);
        assert_eq!(real.cr0 & CR0_PE, 0);

        let prot = preset_registers(ProcessorMode::Protected32, &layout, &tables).unwrap();
        assert_eq!(prot.cr0 & (CR0_PE | CR0_PG), CR0_PE);

        for regs in [long, real, prot] {
            assert_eq!(regs.rip, 0x8000);
            assert_eq!(regs.rsp(), MIN_MEM_SIZE as u64);
        }

        assert_eq!(
            preset_registers(ProcessorMode::Long64, &layout, &BuiltTables::default()),
            Err(PlatformError::MissingTables(ProcessorMode::Long64))
        );
    }
}
