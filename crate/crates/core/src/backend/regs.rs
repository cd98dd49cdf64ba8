// SPDX-License-Identifier: Apache-2.0

//! The modeled x86 register file.

pub const CR0_PE: u64 = 1 << 0;
pub const CR0_MP: u64 = 1 << 1;
pub const CR0_ET: u64 = 1 << 4;
pub const CR0_NE: u64 = 1 << 5;
pub const CR0_WP: u64 = 1 << 16;
pub const CR0_NW: u64 = 1 << 29;
pub const CR0_CD: u64 = 1 << 30;
pub const CR0_PG: u64 = 1 << 31;

pub const CR4_PAE: u64 = 1 << 5;

pub const EFER_SCE: u64 = 1 << 0;
pub const EFER_LME: u64 = 1 << 8;
pub const EFER_LMA: u64 = 1 << 10;

/// Bit 1 of RFLAGS is reserved and always reads as one.
pub const RFLAGS_RESERVED: u64 = 1 << 1;

/// Indices into [`RegisterFile::gpr`], in hardware encoding order.
pub mod gpr {
    pub const RAX: usize = 0;
    pub const RCX: usize = 1;
    pub const RDX: usize = 2;
    pub const RBX: usize = 3;
    pub const RSP: usize = 4;
    pub const RBP: usize = 5;
    pub const RSI: usize = 6;
    pub const RDI: usize = 7;
    pub const R8: usize = 8;
    pub const R15: usize = 15;
}

/// Segment-attribute bits, in the layout used by VMX access-rights fields.
pub mod access {
    pub const TYPE_MASK: u16 = 0xf;
    pub const TYPE_DATA_RW_ACCESSED: u16 = 0x3;
    pub const TYPE_CODE_RX_ACCESSED: u16 = 0xb;
    pub const S: u16 = 1 << 4;
    pub const DPL_SHIFT: u16 = 5;
    pub const P: u16 = 1 << 7;
    pub const AVL: u16 = 1 << 12;
    pub const L: u16 = 1 << 13;
    pub const DB: u16 = 1 << 14;
    pub const G: u16 = 1 << 15;
}

/// Hidden (cached) part of a segment register plus its selector.
///
/// `limit` is the expanded byte limit, i.e. what the processor uses after
/// applying granularity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Segment {
    pub selector: u16,
    pub base: u64,
    pub limit: u32,
    pub access: u16,
}

impl Segment {
    pub fn seg_type(&self) -> u8 {
        (self.access & access::TYPE_MASK) as u8
    }
    pub fn present(&self) -> bool {
        self.access & access::P != 0
    }
    pub fn system(&self) -> bool {
        self.access & access::S == 0
    }
    pub fn dpl(&self) -> u8 {
        ((self.access >> access::DPL_SHIFT) & 0x3) as u8
    }
    pub fn long(&self) -> bool {
        self.access & access::L != 0
    }
    pub fn default_big(&self) -> bool {
        self.access & access::DB != 0
    }
    pub fn granular(&self) -> bool {
        self.access & access::G != 0
    }
    pub fn avl(&self) -> bool {
        self.access & access::AVL != 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DescriptorTable {
    pub base: u64,
    pub limit: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegisterFile {
    pub gpr: [u64; 16],
    pub rip: u64,
    pub rflags: u64,
    pub cr0: u64,
    pub cr3: u64,
    pub cr4: u64,
    pub efer: u64,
    pub cs: Segment,
    pub ds: Segment,
    pub es: Segment,
    pub ss: Segment,
    pub gdt: DescriptorTable,
}

impl Default for RegisterFile {
    fn default() -> Self {
        Self::power_on()
    }
}

impl RegisterFile {
    /// Architectural state after RESET/INIT.
    pub fn power_on() -> Self {
        let data = Segment {
            selector: 0,
            base: 0,
            limit: 0xffff,
            access: access::P | access::S | access::TYPE_DATA_RW_ACCESSED,
        };
        RegisterFile {
            gpr: [0; 16],
            rip: 0xfff0,
            rflags: RFLAGS_RESERVED,
            cr0: CR0_CD | CR0_NW | CR0_ET,
            cr3: 0,
            cr4: 0,
            efer: 0,
            cs: Segment {
                selector: 0xf000,
                base: 0xffff_0000,
                limit: 0xffff,
                access: access::P | access::S | access::TYPE_CODE_RX_ACCESSED,
            },
            ds: data,
            es: data,
            ss: data,
            gdt: DescriptorTable { base: 0, limit: 0xffff },
        }
    }

    pub fn rsp(&self) -> u64 {
        self.gpr[gpr::RSP]
    }

    pub fn set_rsp(&mut self, value: u64) {
        self.gpr[gpr::RSP] = value;
    }

    /// Checks the control-register combinations the backends rely on.
    pub fn check_consistency(&self) -> Result<(), &'static str> {
        let pe = self.cr0 & CR0_PE != 0;
        let pg = self.cr0 & CR0_PG != 0;
        if pg && !pe {
            return Err("cr0.PG requires cr0.PE");
        }
        let long = self.efer & EFER_LME != 0 && pg;
        if long && self.cr4 & CR4_PAE == 0 {
            return Err("long mode requires cr4.PAE");
        }
        if self.efer & EFER_LMA != 0 && !long {
            return Err("EFER.LMA set outside long mode");
        }
        if self.cs.long() && !long {
            return Err("64-bit code segment outside long mode");
        }
        if long && self.cs.long() && self.cs.default_big() {
            return Err("64-bit code segment must have D clear");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_on_is_real_mode() {
        let r = RegisterFile::power_on();
        assert_eq!(r.cr0 & CR0_PE, 0);
        assert_eq!(r.rflags, 0x2);
        assert!(r.check_consistency().is_ok());
    }

    #[test]
    fn inconsistent_long_mode_rejected() {
        let mut r = RegisterFile::power_on();
        r.cr0 = CR0_PE | CR0_PG;
        r.efer = EFER_LME | EFER_LMA;
        assert!(r.check_consistency().is_err());
        r.cr4 = CR4_PAE;
        assert!(r.check_consistency().is_ok());
    }

    #[test]
    fn bit_positions() {
        // Positions from the architecture manuals' control-register tables.
        assert_eq!(CR0_PE, 0x1);
        assert_eq!(CR0_PG, 0x8000_0000);
        assert_eq!(CR4_PAE, 0x20);
        assert_eq!(EFER_LME, 0x100);
        assert_eq!(EFER_LMA, 0x400);
    }
}
