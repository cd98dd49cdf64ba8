// SPDX-License-Identifier: Apache-2.0

//! Guest images.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::backend::memory::{validate_mem_size, MIN_MEM_SIZE};
use crate::backend::MemoryError;
use crate::platform::{ProcessorMode, IMAGE_BASE};

pub mod builtin;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("image name must be non-empty")]
    EmptyName,
    #[error("image of {len} bytes at {load:#x} does not fit in {mem_size:#x} bytes")]
    TooLarge { len: usize, load: u64, mem_size: usize },
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// A flat guest binary plus everything needed to start it.
///
/// Code is reference-counted, so clones are cheap even for large images.
#[derive(Clone, PartialEq, Eq)]
pub struct VirtineImage {
    name: Arc<str>,
    code: Arc<[u8]>,
    entry_mode: ProcessorMode,
    mem_size: usize,
}

impl fmt::Debug for VirtineImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VirtineImage")
            .field("name", &self.name)
            .field("code_len", &self.code.len())
            .field("entry_mode", &self.entry_mode)
            .field("mem_size", &self.mem_size)
            .finish()
    }
}

impl VirtineImage {
    pub fn new(
        name: &str,
        code: impl Into<Arc<[u8]>>,
        entry_mode: ProcessorMode,
        mem_size: usize,
    ) -> Result<Self, ImageError> {
        if name.is_empty() {
            return Err(ImageError::EmptyName);
        }
        validate_mem_size(mem_size)?;
        let code = code.into();
        if code.len() as u64 + IMAGE_BASE > mem_size as u64 {
            return Err(ImageError::TooLarge {
                len: code.len(),
                load: IMAGE_BASE,
                mem_size,
            });
        }
        Ok(VirtineImage {
            name: name.into(),
            code,
            entry_mode,
            mem_size,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn code(&self) -> &[u8] {
        &self.code
    }

    pub fn load_gpa(&self) -> u64 {
        IMAGE_BASE
    }

    pub fn entry_mode(&self) -> ProcessorMode {
        self.entry_mode
    }

    pub fn mem_size(&self) -> usize {
        self.mem_size
    }

    /// Same code under a different name, mode or memory size.
    pub fn with_mem_size(&self, mem_size: usize) -> Result<Self, ImageError> {
        Self::new(&self.name, self.code.clone(), self.entry_mode, mem_size)
    }

    /// `hlt` followed by zeros up to `len` bytes, in the smallest memory that holds it.
    pub fn padded_hlt(len: usize, mode: ProcessorMode) -> Result<Self, ImageError> {
        let mut code = vec![0u8; len.max(1)];
        code[0] = 0xf4;
        let mem = (len as u64 + IMAGE_BASE)
            .next_power_of_two()
            .max(MIN_MEM_SIZE as u64) as usize;
        Self::new(&format!("hlt-{len}"), code, mode, mem)
    }

    /// Builtin hardware guests by name.
    pub fn builtin(name: &str) -> Option<Self> {
        use builtin::*;
        let (code, mode) = match name {
            "hlt" => (HLT, ProcessorMode::Real16),
            "hlt64" => (HLT, ProcessorMode::Long64),
            "out-hlt" => (OUT_HLT, ProcessorMode::Real16),
            "fib16" => (FIB16, ProcessorMode::Real16),
            "fib32" => (FIB32, ProcessorMode::Protected32),
            "fib64" => (FIB64, ProcessorMode::Long64),
            "fib64-snapshot" => (FIB64_SNAPSHOT, ProcessorMode::Long64),
            "echo64" => (ECHO64, ProcessorMode::Long64),
            "denied64" => (DENIED64, ProcessorMode::Long64),
            "spin" => (SPIN, ProcessorMode::Long64),
            _ => return None,
        };
        Some(Self::new(name, code, mode, MIN_MEM_SIZE).expect("builtin images fit"))
    }

    /// fib for `mode` from the builtin set.
    pub fn builtin_fib(mode: ProcessorMode) -> Self {
        let name = match mode {
            ProcessorMode::Real16 => "fib16",
            ProcessorMode::Protected32 => "fib32",
            ProcessorMode::Long64 => "fib64",
        };
        Self::builtin(name).expect("fib builtins exist")
    }
}

pub const BUILTIN_NAMES: &[&str] = &[
    "hlt",
    "hlt64",
    "out-hlt",
    "fib16",
    "fib32",
    "fib64",
    "fib64-snapshot",
    "echo64",
    "denied64",
    "spin",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_oversized_code() {
        let err = VirtineImage::new("x", vec![0u8; 0x8001], ProcessorMode::Long64, 0x10000);
        assert!(matches!(err, Err(ImageError::TooLarge { .. })));
        VirtineImage::new("x", vec![0u8; 0x8000], ProcessorMode::Long64, 0x10000).unwrap();
    }

    #[test]
    fn rejects_bad_memory() {
        assert!(VirtineImage::new("x", vec![0xf4], ProcessorMode::Real16, 3 * 1024).is_err());
        assert!(VirtineImage::new("", vec![0xf4], ProcessorMode::Real16, MIN_MEM_SIZE).is_err());
    }

    #[test]
    fn padded_hlt_sizes() {
        let small = VirtineImage::padded_hlt(16 * 1024, ProcessorMode::Real16).unwrap();
        assert_eq!(small.mem_size(), 64 * 1024);
        let big = VirtineImage::padded_hlt(16 << 20, ProcessorMode::Real16).unwrap();
        assert_eq!(big.mem_size(), 32 << 20);
        assert_eq!(big.code()[0], 0xf4);
        assert!(big.code()[1..].iter().all(|&b| b == 0));
    }

    #[test]
    fn builtins_resolve() {
        for name in BUILTIN_NAMES {
            let image = VirtineImage::builtin(name).unwrap();
            assert!(image.code().len() < 512, "{name} is {} bytes", image.code().len());
        }
        assert!(VirtineImage::builtin("nope").is_none());
    }
}
