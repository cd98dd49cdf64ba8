// SPDX-License-Identifier: Apache-2.0

//! Flat guest-physical memory backing a single virtual context.
//!
//! Guest-physical address 0 maps to offset 0 of one anonymous host mapping.
//! Every access made through this type is bounds-checked; there is no way to
//! reach host memory outside the mapping through the safe interface.

use std::ops::Range;
use std::ptr::NonNull;

use thiserror::Error;

/// Smallest guest memory region accepted by any backend.
pub const MIN_MEM_SIZE: usize = 64 * 1024;
/// Largest guest memory region accepted by any backend.
pub const MAX_MEM_SIZE: usize = 1 << 30;
pub const PAGE_SIZE: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("guest access out of bounds: gpa {gpa:#x} len {len:#x}")]
    OutOfBounds { gpa: u64, len: u64 },
    #[error("invalid guest memory size {0:#x}: must be a power of two in [64KiB, 1GiB]")]
    InvalidSize(usize),
    #[error("failed to map {size:#x} bytes of guest memory: {reason}")]
    Allocation { size: usize, reason: String },
}

/// Checks the size contract shared by every backend.
pub fn validate_mem_size(size: usize) -> Result<(), MemoryError> {
    if !(MIN_MEM_SIZE..=MAX_MEM_SIZE).contains(&size)
        || !size.is_power_of_two()
        || size % PAGE_SIZE != 0
    {
        return Err(MemoryError::InvalidSize(size));
    }
    Ok(())
}

/// Smallest valid memory size that can hold `bytes`.
pub fn mem_size_for(bytes: u64) -> Result<usize, MemoryError> {
    let want = usize::try_from(bytes)
        .map_err(|_| MemoryError::InvalidSize(usize::MAX))?
        .max(MIN_MEM_SIZE);
    let size = want
        .checked_next_power_of_two()
        .ok_or(MemoryError::InvalidSize(want))?;
    validate_mem_size(size)?;
    Ok(size)
}

pub struct GuestMemory {
    base: NonNull<u8>,
    size: usize,
}

// SAFETY: the mapping is owned exclusively by this value; access is governed by
// the usual `&`/`&mut` rules on `GuestMemory` itself.
unsafe impl Send for GuestMemory {}
unsafe impl Sync for GuestMemory {}

impl GuestMemory {
    /// Maps `size` zeroed bytes of private anonymous memory.
    pub fn new(size: usize) -> Result<Self, MemoryError> {
        validate_mem_size(size)?;
        // SAFETY: anonymous private mapping with no fixed address.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                size,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(MemoryError::Allocation {
                size,
                reason: std::io::Error::last_os_error().to_string(),
            });
        }
        Ok(GuestMemory {
            base: NonNull::new(ptr as *mut u8).expect("mmap returned null"),
            size,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Host virtual address of guest-physical 0.
    pub fn host_base(&self) -> u64 {
        self.base.as_ptr() as u64
    }

    /// Host address range backing this region.
    pub fn host_range(&self) -> Range<usize> {
        let start = self.base.as_ptr() as usize;
        start..start + self.size
    }

    fn check(&self, gpa: u64, len: usize) -> Result<usize, MemoryError> {
        let oob = MemoryError::OutOfBounds {
            gpa,
            len: len as u64,
        };
        let start = usize::try_from(gpa).map_err(|_| oob.clone())?;
        match start.checked_add(len) {
            Some(end) if end <= self.size => Ok(start),
            _ => Err(oob),
        }
    }

    /// Returns `true` when `[gpa, gpa + len)` lies entirely inside guest memory.
    pub fn contains(&self, gpa: u64, len: u64) -> bool {
        usize::try_from(len)
            .ok()
            .is_some_and(|len| self.check(gpa, len).is_ok())
    }

    pub fn as_slice(&self) -> &[u8] {
        // SAFETY: the mapping is live for the lifetime of `self` and `size` bytes long.
        unsafe { std::slice::from_raw_parts(self.base.as_ptr(), self.size) }
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        // SAFETY: as above, and `&mut self` guarantees exclusivity.
        unsafe { std::slice::from_raw_parts_mut(self.base.as_ptr(), self.size) }
    }

    pub fn slice(&self, gpa: u64, len: usize) -> Result<&[u8], MemoryError> {
        let start = self.check(gpa, len)?;
        Ok(&self.as_slice()[start..start + len])
    }

    pub fn slice_mut(&mut self, gpa: u64, len: usize) -> Result<&mut [u8], MemoryError> {
        let start = self.check(gpa, len)?;
        Ok(&mut self.as_mut_slice()[start..start + len])
    }

    pub fn read(&self, gpa: u64, len: usize) -> Result<Vec<u8>, MemoryError> {
        self.slice(gpa, len).map(<[u8]>::to_vec)
    }

    pub fn read_into(&self, gpa: u64, buf: &mut [u8]) -> Result<(), MemoryError> {
        buf.copy_from_slice(self.slice(gpa, buf.len())?);
        Ok(())
    }

    pub fn write(&mut self, gpa: u64, bytes: &[u8]) -> Result<(), MemoryError> {
        self.slice_mut(gpa, bytes.len())?.copy_from_slice(bytes);
        Ok(())
    }

    pub fn read_u64(&self, gpa: u64) -> Result<u64, MemoryError> {
        let mut b = [0u8; 8];
        self.read_into(gpa, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u64(&mut self, gpa: u64, value: u64) -> Result<(), MemoryError> {
        self.write(gpa, &value.to_le_bytes())
    }

    pub fn fill(&mut self, gpa: u64, len: usize, byte: u8) -> Result<(), MemoryError> {
        self.slice_mut(gpa, len)?.fill(byte);
        Ok(())
    }

    /// Zeroes the whole region.
    pub fn zero(&mut self) {
        self.as_mut_slice().fill(0);
    }

    /// Full scan for a non-zero byte.
    pub fn is_zeroed(&self) -> bool {
        let (head, words, tail) = unsafe { self.as_slice().align_to::<u64>() };
        head.iter().all(|&b| b == 0) && words.iter().all(|&w| w == 0) && tail.iter().all(|&b| b == 0)
    }

    /// Replaces the whole region with `image`, which must be exactly `size` bytes.
    pub fn copy_from(&mut self, image: &[u8]) -> Result<(), MemoryError> {
        if image.len() != self.size {
            return Err(MemoryError::OutOfBounds {
                gpa: 0,
                len: image.len() as u64,
            });
        }
        self.as_mut_slice().copy_from_slice(image);
        Ok(())
    }
}

impl Drop for GuestMemory {
    fn drop(&mut self) {
        // SAFETY: unmapping exactly the region mapped in `new`.
        unsafe {
            libc::munmap(self.base.as_ptr() as *mut libc::c_void, self.size);
        }
    }
}

impl std::fmt::Debug for GuestMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GuestMemory")
            .field("host_base", &format_args!("{:#x}", self.host_base()))
            .field("size", &format_args!("{:#x}", self.size))
            .finish()
    }
}

/// True when two host ranges share at least one byte.
pub fn ranges_overlap(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fresh_memory_is_zero() {
        let mem = GuestMemory::new(MIN_MEM_SIZE).unwrap();
        assert_eq!(mem.size(), 65536);
        assert!(mem.is_zeroed());
        assert_eq!(mem.read(0, 65536).unwrap(), vec![0u8; 65536]);
    }

    #[test]
    fn size_contract() {
        assert!(GuestMemory::new(3 * 1024).is_err());
        assert!(GuestMemory::new(96 * 1024).is_err());
        assert!(GuestMemory::new(16 << 20).is_ok());
        assert_eq!(validate_mem_size(2 << 30), Err(MemoryError::InvalidSize(2 << 30)));
        assert_eq!(mem_size_for(0x8000 + 16 * 1024).unwrap(), 64 * 1024);
        assert_eq!(mem_size_for(0x8000 + (16 << 20)).unwrap(), 32 << 20);
    }

    #[test]
    fn round_trip_and_edges() {
        let mut mem = GuestMemory::new(MIN_MEM_SIZE).unwrap();
        let image = b"\xf4virtine";
        mem.write(0x8000, image).unwrap();
        assert_eq!(mem.read(0x8000, image.len()).unwrap(), image);
        assert_eq!(mem.read(0, 0).unwrap(), Vec::<u8>::new());
        let size = mem.size() as u64;
        assert_eq!(
            mem.read(size - 1, 2),
            Err(MemoryError::OutOfBounds { gpa: size - 1, len: 2 })
        );
        assert!(mem.read(size, 0).is_ok());
        assert!(mem.read(u64::MAX, 1).is_err());
    }

    proptest! {
        #[test]
        fn out_of_bounds_writes_leave_memory_unchanged(gpa in 0u64..0x20000, len in 0usize..0x20000) {
            let mut mem = GuestMemory::new(MIN_MEM_SIZE).unwrap();
            mem.fill(0, MIN_MEM_SIZE, 0x5a).unwrap();
            let data = vec![0xa5u8; len];
            let res = mem.write(gpa, &data);
            if gpa as usize + len > MIN_MEM_SIZE {
                prop_assert!(res.is_err());
                prop_assert!(mem.as_slice().iter().all(|&b| b == 0x5a));
                prop_assert!(mem.read(gpa, len).is_err());
            } else {
                prop_assert!(res.is_ok());
            }
        }
    }
}
