// SPDX-License-Identifier: Apache-2.0

//! Static-file HTTP over loopback: a native handler against the virtine
//! service with and without snapshots.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use virtine::backend::mock::programs;
use virtine::client::http::{native_response, read_request};
use virtine::client::service::{serve_http, ServiceConfig, ServiceHandle};
use virtine::hypercall::HypercallPolicy;
use virtine::platform::ProcessorMode;

use super::{Config, MockWorkload};
use crate::measure::{Recorder, Unit};
use crate::timer::Timer;
use crate::BenchError;

pub const NAME: &str = "http";
pub const WORKLOAD: &str = "http";

pub const NATIVE: &str = "native";
pub const VIRTINE: &str = "virtine";
pub const SNAPSHOT: &str = "snapshot";

/// Suffixes of the throughput and per-request hypercall experiments.
pub const THROUGHPUT: &str = "throughput";
pub const HYPERCALLS: &str = "hypercalls";

pub const REQUEST: &[u8] = b"GET /index.html HTTP/1.0\r\n\r\n";

#[derive(Clone, Debug)]
pub struct HttpParams {
    /// Client threads issuing requests at once.
    pub concurrency: usize,
    /// Requests per throughput sample.
    pub batch: usize,
    /// Size of the served document.
    pub document_len: usize,
}

impl Default for HttpParams {
    fn default() -> Self {
        HttpParams {
            concurrency: 1,
            batch: 50,
            document_len: 4096,
        }
    }
}

/// A document root holding `index.html`, removed on drop.
struct DocRoot(PathBuf);

impl DocRoot {
    fn new(len: usize) -> std::io::Result<Self> {
        let dir = std::env::temp_dir().join(format!("virtine-bench-http-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let body: Vec<u8> = (0..len).map(|i| b'a' + (i % 26) as u8).collect();
        std::fs::write(dir.join("index.html"), body)?;
        Ok(DocRoot(dir))
    }
}

impl Drop for DocRoot {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

/// Same protocol subset as the virtine service, answered on the host.
struct NativeServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl NativeServer {
    fn start(root: &Path) -> std::io::Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", 0))?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let (root, flag) = (root.to_owned(), stop.clone());
        let thread = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(mut conn) = conn else { continue };
                let _ = conn.set_nodelay(true);
                if let Ok(req) = read_request(&mut conn) {
                    let _ = conn.write_all(&native_response(&root, &req));
                }
            }
        });
        Ok(NativeServer {
            addr,
            stop,
            thread: Some(thread),
        })
    }
}

impl Drop for NativeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// One request on a fresh connection; the whole response.
pub fn fetch(addr: SocketAddr) -> std::io::Result<Vec<u8>> {
    let mut conn = TcpStream::connect(addr)?;
    conn.set_nodelay(true)?;
    conn.write_all(REQUEST)?;
    let mut resp = Vec::new();
    conn.read_to_end(&mut resp)?;
    Ok(resp)
}

/// Latencies of `count` requests spread over `threads` clients, and the wall time.
fn batch(timer: Timer, addr: SocketAddr, count: usize, threads: usize) -> Result<(Vec<u64>, f64), BenchError> {
    let threads = threads.clamp(1, count.max(1));
    let start = Instant::now();
    let workers: Vec<_> = (0..threads)
        .map(|t| {
            let share = count / threads + usize::from(t < count % threads);
            std::thread::spawn(move || -> Result<Vec<u64>, std::io::Error> {
                (0..share)
                    .map(|_| {
                        let (c, r) = timer.time(|| fetch(addr));
                        r.map(|_| c)
                    })
                    .collect()
            })
        })
        .collect();
    let mut lat = Vec::with_capacity(count);
    for w in workers {
        lat.extend(w.join().map_err(|_| BenchError::Mismatch("client thread panicked".into()))??);
    }
    Ok((lat, start.elapsed().as_secs_f64()))
}

fn measure(
    cfg: &Config,
    rec: &mut Recorder,
    params: &HttpParams,
    variant: &str,
    addr: SocketAddr,
) -> Result<Vec<u8>, BenchError> {
    let reference = fetch(addr)?;
    for _ in 0..cfg.warmup() {
        fetch(addr)?;
    }
    let mut left = cfg.trials;
    while left > 0 {
        let n = left.min(params.batch.max(1));
        let (lat, secs) = batch(cfg.timer, addr, n, params.concurrency)?;
        for c in lat {
            rec.cycles(variant, c);
        }
        rec.value(THROUGHPUT, variant, n as f64 / secs, Unit::Rps);
        left -= n;
    }
    Ok(reference)
}

fn service(
    cfg: &Config,
    root: &Path,
    image: &virtine::VirtineImage,
    policy: &HypercallPolicy,
    snapshot: bool,
) -> Result<ServiceHandle, BenchError> {
    let mut sc = ServiceConfig::new(Arc::clone(&cfg.backend), image.clone(), root);
    sc.policy = Some(HypercallPolicy::builder().mask(policy.allow_mask()).sandbox_root(root).build());
    sc.snapshot = snapshot;
    sc.workers = 1;
    serve_http(sc).map_err(|e| BenchError::Mismatch(e.to_string()))
}

pub fn run(cfg: &Config, rec: &mut Recorder, params: &HttpParams) -> Result<(), BenchError> {
    let root = DocRoot::new(params.document_len)?;
    let mock = MockWorkload {
        program: programs::HTTP,
        mode: ProcessorMode::Long64,
        mem_size: 1 << 20,
    };
    let Some((image, policy)) = cfg.workload(WORKLOAD, mock, HypercallPolicy::http(&root.0))? else {
        return Err(BenchError::NeedsGuest {
            experiment: NAME,
            workload: WORKLOAD,
        });
    };

    let native = {
        let server = NativeServer::start(&root.0)?;
        measure(cfg, rec, params, NATIVE, server.addr)?
    };
    for (variant, snapshot) in [(VIRTINE, false), (SNAPSHOT, true)] {
        let svc = service(cfg, &root.0, &image, &policy, snapshot)?;
        let body = measure(cfg, rec, params, variant, svc.addr())?;
        if body != native {
            return Err(BenchError::Mismatch(format!(
                "{variant} response differs from the native one ({} vs {} bytes)",
                body.len(),
                native.len()
            )));
        }
        // Each connection's record lands after its response is sent.
        let deadline = Instant::now() + std::time::Duration::from_secs(5);
        let expected = (cfg.trials + cfg.warmup() + 1).min(virtine::client::service::LOG_CAPACITY);
        while svc.records().len() < expected && Instant::now() < deadline {
            std::thread::yield_now();
        }
        for r in svc.records() {
            if let Some(e) = r.error {
                return Err(BenchError::Mismatch(format!("{variant} request failed: {e}")));
            }
            rec.value(HYPERCALLS, variant, r.hypercalls.len() as f64, Unit::Count);
        }
    }
    Ok(())
}
