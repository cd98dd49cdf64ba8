// SPDX-License-Identifier: Apache-2.0

//! Start-up latency against image size, snapshot restore against memory
//! size, and a plain memory copy for the bandwidth reference.

use std::collections::BTreeSet;
use std::hint::black_box;

use virtine::backend::mock::{programs, MockBackend};
use virtine::backend::VcpuExit;
use virtine::image::VirtineImage;
use virtine::platform::ProcessorMode;
use virtine::pool::{Pool, ReleaseMode};
use virtine::snapshot;

use super::Config;
use crate::measure::Recorder;
use crate::BenchError;

pub const NAME: &str = "image-size";

/// Variant prefixes; the suffix is the byte count.
pub const STARTUP: &str = "startup";
pub const RESTORE: &str = "restore";
pub const MEMCPY: &str = "memcpy";

/// 16KB to 16MB in doublings.
pub fn default_sizes() -> Vec<usize> {
    (14..=24).map(|s| 1usize << s).collect()
}

pub fn variant(prefix: &str, bytes: usize) -> String {
    format!("{prefix}-{bytes}")
}

/// Splits `startup-16384` into its prefix and byte count.
pub fn parse_variant(v: &str) -> Option<(&str, usize)> {
    let (prefix, n) = v.rsplit_once('-')?;
    Some((prefix, n.parse().ok()?))
}

/// A `size`-byte image that halts at once.
fn image(cfg: &Config, size: usize) -> Result<VirtineImage, BenchError> {
    let hw = VirtineImage::padded_hlt(size, ProcessorMode::Real16)?;
    if !cfg.is_mock() {
        return Ok(hw);
    }
    let mut code = MockBackend::code(programs::HLT);
    code.resize(size.max(code.len()), 0);
    Ok(VirtineImage::new(hw.name(), code, ProcessorMode::Real16, hw.mem_size())?)
}

pub fn run(cfg: &Config, rec: &mut Recorder, sizes: &[usize]) -> Result<(), BenchError> {
    let timer = cfg.timer;
    let mut restored = BTreeSet::new();
    for &size in sizes {
        let image = image(cfg, size)?;
        let pool = Pool::new(cfg.backend.clone(), 1);
        pool.prewarm(image.mem_size(), 1)?;
        for i in 0..cfg.warmup() + cfg.trials {
            let (c, r) = timer.time(|| -> Result<_, BenchError> {
                let mut shell = pool.acquire(image.mem_size())?;
                shell.load(&image)?;
                shell.enter()?;
                let exit = shell.run(None)?;
                Ok((shell, exit))
            });
            let (shell, exit) = r?;
            pool.release(shell, ReleaseMode::SyncClean);
            if exit != VcpuExit::Halt {
                return Err(BenchError::Mismatch(format!("{size}-byte image exited with {exit:?}")));
            }
            if i >= cfg.warmup() {
                rec.cycles(&variant(STARTUP, size), c);
            }
        }

        // Restore of a full-memory snapshot, once per memory size.
        if !restored.insert(image.mem_size()) {
            continue;
        }
        let mut shell = pool.acquire(image.mem_size())?;
        shell.load(&image)?;
        shell.enter()?;
        let snap = snapshot::take_snapshot(&mut shell, image.name())?;
        pool.release(shell, ReleaseMode::SyncClean);
        for i in 0..cfg.warmup() + cfg.trials {
            let mut shell = pool.acquire(image.mem_size())?;
            let (c, r) = timer.time(|| snapshot::restore(&mut shell, &snap));
            r?;
            pool.release(shell, ReleaseMode::SyncClean);
            if i >= cfg.warmup() {
                rec.cycles(&variant(RESTORE, image.mem_size()), c);
            }
        }
    }

    let largest = sizes.iter().copied().max().unwrap_or(0);
    if largest > 0 {
        let src = vec![0x5au8; largest];
        let mut dst = vec![0u8; largest];
        for i in 0..cfg.warmup() + cfg.trials {
            let (c, ()) = timer.time(|| dst.copy_from_slice(black_box(&src)));
            black_box(&dst);
            if i >= cfg.warmup() {
                rec.cycles(&variant(MEMCPY, largest), c);
            }
        }
    }
    Ok(())
}
