// SPDX-License-Identifier: Apache-2.0

//! How long it takes to get an execution context running, from a function
//! call up to a new process.

use std::hint::black_box;
use std::process::Command;

use virtine::backend::mock::{programs, MockBackend};
use virtine::backend::{VcpuExit, MIN_MEM_SIZE};
use virtine::image::VirtineImage;
use virtine::platform::ProcessorMode;
use virtine::pool::{Pool, ReleaseMode, VirtineShell};

use super::Config;
use crate::measure::Recorder;
use crate::BenchError;

pub const NAME: &str = "creation-ladder";

pub const FUNCTION: &str = "function";
pub const BARE_RUN: &str = "bare-run-resume";
pub const CACHED_ASYNC: &str = "cached-async";
pub const CACHED: &str = "cached";
pub const THREAD: &str = "thread";
pub const FRESH: &str = "fresh-create";
pub const FORK: &str = "process-fork";
pub const SPAWN: &str = "process-spawn-exec";

/// Expected order, fastest first.
pub const ORDER: [&str; 8] = [FUNCTION, BARE_RUN, CACHED_ASYNC, CACHED, THREAD, FRESH, FORK, SPAWN];

/// `hlt; jmp .-3`: every run stops at the same `hlt`.
const HLT_LOOP: &[u8] = &[0xf4, 0xeb, 0xfd];

#[inline(never)]
fn empty_function(x: u64) -> u64 {
    black_box(x)
}

fn halt(exit: VcpuExit) -> Result<(), BenchError> {
    match exit {
        VcpuExit::Halt => Ok(()),
        other => Err(BenchError::Mismatch(format!("expected a halt, got {other:?}"))),
    }
}

/// Acquire, load the hlt image, run it to the halt.
fn start(pool: &Pool, image: &VirtineImage) -> Result<VirtineShell, BenchError> {
    let mut shell = pool.acquire(image.mem_size())?;
    shell.load(image)?;
    shell.enter()?;
    halt(shell.run(None)?)?;
    Ok(shell)
}

fn repeat(
    cfg: &Config,
    rec: &mut Recorder,
    variant: &str,
    mut trial: impl FnMut() -> Result<u64, BenchError>,
) -> Result<(), BenchError> {
    for _ in 0..cfg.warmup() {
        trial()?;
    }
    for _ in 0..cfg.trials {
        let c = trial()?;
        rec.cycles(variant, c);
    }
    Ok(())
}

fn fork_and_wait() -> Result<(), BenchError> {
    // SAFETY: the child only calls the async-signal-safe _exit.
    unsafe {
        match libc::fork() {
            -1 => Err(std::io::Error::last_os_error().into()),
            0 => libc::_exit(0),
            pid => {
                let mut status = 0;
                if libc::waitpid(pid, &mut status, 0) != pid {
                    return Err(std::io::Error::last_os_error().into());
                }
                Ok(())
            }
        }
    }
}

pub fn run(cfg: &Config, rec: &mut Recorder) -> Result<(), BenchError> {
    let timer = cfg.timer;
    let (hlt, looping) = if cfg.is_mock() {
        // The mock hlt program halts again on every resume.
        let image = MockBackend::image(programs::HLT, ProcessorMode::Real16, MIN_MEM_SIZE);
        (image.clone(), image)
    } else {
        (
            VirtineImage::new("hlt", vec![0xf4], ProcessorMode::Real16, MIN_MEM_SIZE)?,
            VirtineImage::new("hlt-loop", HLT_LOOP.to_vec(), ProcessorMode::Real16, MIN_MEM_SIZE)?,
        )
    };

    repeat(cfg, rec, FUNCTION, || Ok(timer.time(|| empty_function(1)).0))?;

    // One shell, resumed over and over.
    let pool = Pool::new(cfg.backend.clone(), 4);
    let mut shell = start(&pool, &looping)?;
    repeat(cfg, rec, BARE_RUN, || {
        let (c, exit) = timer.time(|| shell.run(None));
        halt(exit?)?;
        Ok(c)
    })?;
    pool.release(shell, ReleaseMode::SyncClean);

    // The cleaner gets the gap between requests, as it would on a spare core.
    let pool = Pool::new(cfg.backend.clone(), 4);
    pool.prewarm(MIN_MEM_SIZE, 2)?;
    repeat(cfg, rec, CACHED_ASYNC, || {
        pool.wait_idle();
        let (c, r) = timer.time(|| -> Result<(), BenchError> {
            let shell = start(&pool, &hlt)?;
            pool.release(shell, ReleaseMode::AsyncClean);
            Ok(())
        });
        r?;
        Ok(c)
    })?;
    pool.wait_idle();

    let pool = Pool::new(cfg.backend.clone(), 4);
    pool.prewarm(MIN_MEM_SIZE, 1)?;
    repeat(cfg, rec, CACHED, || {
        let (c, r) = timer.time(|| -> Result<(), BenchError> {
            let shell = start(&pool, &hlt)?;
            pool.release(shell, ReleaseMode::SyncClean);
            Ok(())
        });
        r?;
        Ok(c)
    })?;

    repeat(cfg, rec, THREAD, || {
        let (c, r) = timer.time(|| std::thread::spawn(|| black_box(0u64)).join());
        r.map_err(|_| BenchError::Mismatch("thread panicked".into()))?;
        Ok(c)
    })?;

    // Capacity 0: every shell is created here and destroyed on release.
    let pool = Pool::new(cfg.backend.clone(), 0);
    repeat(cfg, rec, FRESH, || {
        let (c, shell) = timer.time(|| start(&pool, &hlt));
        pool.release(shell?, ReleaseMode::SyncClean);
        Ok(c)
    })?;

    repeat(cfg, rec, FORK, || {
        let (c, r) = timer.time(fork_and_wait);
        r?;
        Ok(c)
    })?;

    let truth = which_true();
    repeat(cfg, rec, SPAWN, || {
        let (c, status) = timer.time(|| Command::new(&truth).status());
        if !status?.success() {
            return Err(BenchError::Mismatch(format!("{truth} failed")));
        }
        Ok(c)
    })?;
    Ok(())
}

fn which_true() -> String {
    ["/bin/true", "/usr/bin/true"]
        .into_iter()
        .find(|p| std::path::Path::new(p).exists())
        .unwrap_or("true")
        .to_owned()
}
