// SPDX-License-Identifier: Apache-2.0

//! Identity map and descriptor checks against an independent page walker.

use proptest::prelude::*;

use virtine::backend::GuestMemory;
use virtine::platform::{self, PlatformLayout, ProcessorMode, IDENTITY_MAP_LIMIT};

const ADDR_MASK: u64 = 0x000f_ffff_ffff_f000;

/// Four-level walk as the MMU does it. Returns the physical address, or
/// `None` if any level is not present.
fn walk(mem: &GuestMemory, cr3: u64, va: u64) -> Option<u64> {
    let entry = |table: u64, index: u64| mem.read_u64((table & ADDR_MASK) + index * 8).ok();
    let pml4e = entry(cr3, (va >> 39) & 0x1ff)?;
    if pml4e & 1 == 0 {
        return None;
    }
    let pdpte = entry(pml4e, (va >> 30) & 0x1ff)?;
    if pdpte & 1 == 0 {
        return None;
    }
    if pdpte & (1 << 7) != 0 {
        return Some((pdpte & 0x000f_ffff_c000_0000) | (va & 0x3fff_ffff));
    }
    let pde = entry(pdpte, (va >> 21) & 0x1ff)?;
    if pde & 1 == 0 {
        return None;
    }
    if pde & (1 << 7) != 0 {
        return Some((pde & 0x000f_ffff_ffe0_0000) | (va & 0x1f_ffff));
    }
    let pte = entry(pde, (va >> 12) & 0x1ff)?;
    (pte & 1 != 0).then(|| (pte & ADDR_MASK) | (va & 0xfff))
}

fn writable(mem: &GuestMemory, cr3: u64, va: u64) -> bool {
    let pml4e = mem.read_u64((cr3 & ADDR_MASK) + ((va >> 39) & 0x1ff) * 8).unwrap();
    let pdpte = mem.read_u64((pml4e & ADDR_MASK) + ((va >> 30) & 0x1ff) * 8).unwrap();
    let pde = mem.read_u64((pdpte & ADDR_MASK) + ((va >> 21) & 0x1ff) * 8).unwrap();
    pml4e & pdpte & pde & 2 != 0
}

fn built(mem_size: usize, table_page: u64) -> (GuestMemory, u64) {
    let mut mem = GuestMemory::new(mem_size).unwrap();
    let mut layout = PlatformLayout::new(mem_size, 16);
    layout.page_table_base = table_page * 0x1000;
    let map = platform::build_identity_page_tables(&mut mem, &layout).unwrap();
    (mem, map.root)
}

proptest! {
    #[test]
    fn identity_below_limit(va in 0..IDENTITY_MAP_LIMIT, size_log in 16u32..22) {
        let (mem, root) = built(1 << size_log, 1);
        prop_assert_eq!(walk(&mem, root, va), Some(va));
        prop_assert!(writable(&mem, root, va));
    }

    #[test]
    fn unmapped_above_limit(va in IDENTITY_MAP_LIMIT..(1u64 << 48)) {
        let (mem, root) = built(1 << 16, 1);
        prop_assert_eq!(walk(&mem, root, va), None);
    }

    /// Tables placed anywhere outside the image and GDT must map identically.
    #[test]
    fn relocated_tables(page in prop::sample::select(vec![1u64, 5, 9, 16, 32]), va in 0..IDENTITY_MAP_LIMIT) {
        let (mem, root) = built(1 << 18, page);
        prop_assert_eq!(root, page * 0x1000);
        prop_assert_eq!(walk(&mem, root, va), Some(va));
    }

    /// The whole entry state for every mode passes the backend's register
    /// consistency check, and long mode's cr3 walks identically.
    #[test]
    fn synthesized_state(mode in prop::sample::select(ProcessorMode::ALL.to_vec()), va in 0..(1u64 << 16)) {
        let mut mem = GuestMemory::new(1 << 16).unwrap();
        let layout = PlatformLayout::new(1 << 16, 64);
        let regs = platform::synthesize(&mut mem, &layout, mode).unwrap();
        prop_assert!(regs.check_consistency().is_ok());
        prop_assert_eq!(regs.rip, layout.image_base);
        prop_assert_eq!(regs.rsp(), layout.stack_top);
        if mode == ProcessorMode::Long64 {
            prop_assert_eq!(walk(&mem, regs.cr3, va), Some(va));
        }
    }
}

#[test]
fn overlap_with_image_is_rejected() {
    let mut mem = GuestMemory::new(1 << 16).unwrap();
    let mut layout = PlatformLayout::new(1 << 16, 0x100);
    layout.page_table_base = layout.image_base;
    assert!(platform::build_identity_page_tables(&mut mem, &layout).is_err());
    assert!(platform::synthesize(&mut mem, &layout, ProcessorMode::Long64).is_err());
}
