// SPDX-License-Identifier: Apache-2.0

//! Reference services: every connection is handled by its own virtine,
//! which sees the socket as descriptor 0.

use std::collections::VecDeque;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{info, warn};
use thiserror::Error;

use crate::backend::Backend;
use crate::hypercall::{HypercallPolicy, StreamResource};
use crate::image::VirtineImage;
use crate::pool::{Pool, ReleaseMode};
use crate::runtime::{snapshots_enabled_by_env, Invocation, Runtime, RuntimeOptions, DEFAULT_TIMEOUT};

/// Requests remembered by a running service.
pub const LOG_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("document root {0:?} is not a directory")]
    BadRoot(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub backend: Arc<dyn Backend>,
    pub image: VirtineImage,
    /// Port 0 picks a free port.
    pub addr: SocketAddr,
    /// Sandbox root for file hypercalls.
    pub root: PathBuf,
    pub pool_capacity: usize,
    pub release_mode: ReleaseMode,
    /// Overrides the service's minimal policy.
    pub policy: Option<HypercallPolicy>,
    pub snapshot: bool,
    /// Accepting threads; 1 is the single-threaded server.
    pub workers: usize,
    pub timeout: Duration,
}

impl ServiceConfig {
    pub fn new(backend: Arc<dyn Backend>, image: VirtineImage, root: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            backend,
            image,
            addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            root: root.into(),
            pool_capacity: 16,
            release_mode: ReleaseMode::SyncClean,
            policy: None,
            snapshot: true,
            workers: 1,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// What happened on one connection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestRecord {
    pub hypercalls: Vec<u64>,
    pub error: Option<String>,
    pub from_snapshot: bool,
    pub shell_id: Option<u64>,
}

#[derive(Default)]
struct Shared {
    stop: AtomicBool,
    served: AtomicU64,
    failed: AtomicU64,
    log: Mutex<VecDeque<RequestRecord>>,
}

/// A running service. Dropping it stops the service.
pub struct ServiceHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    runtime: Arc<Runtime>,
    threads: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    /// Connections handled without error.
    pub fn served(&self) -> u64 {
        self.shared.served.load(Ordering::Relaxed)
    }

    pub fn failed(&self) -> u64 {
        self.shared.failed.load(Ordering::Relaxed)
    }

    /// Most recent requests, oldest first.
    pub fn records(&self) -> Vec<RequestRecord> {
        self.shared.log.lock().unwrap().iter().cloned().collect()
    }

    /// Blocks until the service stops.
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for _ in 0..self.threads.len() {
            // Wake a blocked accept.
            let _ = TcpStream::connect(self.addr);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.stop();
        }
    }
}

/// Echo service: the guest may only `recv`, `send` and `exit`.
pub fn serve_echo(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    let policy = config.policy.clone().unwrap_or_else(HypercallPolicy::echo);
    start(config, policy)
}

/// Static files from `config.root` over the HTTP/1.0 subset in [`super::http`].
pub fn serve_http(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    if !config.root.is_dir() {
        return Err(ServiceError::BadRoot(config.root));
    }
    let policy = config
        .policy
        .clone()
        .unwrap_or_else(|| HypercallPolicy::http(&config.root));
    start(config, policy)
}

fn start(config: ServiceConfig, policy: HypercallPolicy) -> Result<ServiceHandle, ServiceError> {
    let listener = TcpListener::bind(config.addr)?;
    let addr = listener.local_addr()?;
    let options = RuntimeOptions {
        release_mode: config.release_mode,
        timeout: config.timeout,
        snapshots: config.snapshot && snapshots_enabled_by_env(),
    };
    let runtime = Arc::new(Runtime::with_options(
        Pool::new(config.backend.clone(), config.pool_capacity),
        options,
    ));
    let shared = Arc::new(Shared::default());
    let policy = Arc::new(policy);
    let mut threads = Vec::new();
    for i in 0..config.workers.max(1) {
        let listener = listener.try_clone()?;
        let (rt, shared, policy) = (runtime.clone(), shared.clone(), policy.clone());
        let image = config.image.clone();
        let timeout = config.timeout;
        threads.push(
            std::thread::Builder::new()
                .name(format!("virtine-serve-{i}"))
                .spawn(move || accept_loop(listener, &rt, &image, &policy, timeout, &shared))?,
        );
    }
    info!("serving {} on {addr}", config.image.name());
    Ok(ServiceHandle {
        addr,
        shared,
        runtime,
        threads,
    })
}

fn accept_loop(
    listener: TcpListener,
    rt: &Runtime,
    image: &VirtineImage,
    policy: &HypercallPolicy,
    timeout: Duration,
    shared: &Shared,
) {
    for conn in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let conn = match conn {
            Ok(c) => c,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let record = handle(conn, rt, image, policy, timeout);
        match &record.error {
            None => shared.served.fetch_add(1, Ordering::Relaxed),
            Some(e) => {
                warn!("request failed: {e}");
                shared.failed.fetch_add(1, Ordering::Relaxed)
            }
        };
        let mut log = shared.log.lock().unwrap();
        if log.len() == LOG_CAPACITY {
            log.pop_front();
        }
        log.push_back(record);
    }
}

fn handle(
    conn: TcpStream,
    rt: &Runtime,
    image: &VirtineImage,
    policy: &HypercallPolicy,
    timeout: Duration,
) -> RequestRecord {
    let mut record = RequestRecord {
        hypercalls: Vec::new(),
        error: None,
        from_snapshot: false,
        shell_id: None,
    };
    let guest_end = match conn
        .set_read_timeout(Some(timeout))
        .and_then(|()| conn.set_nodelay(true))
        .and_then(|()| conn.try_clone())
    {
        Ok(c) => c,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let inv = Invocation::new(image, &[], policy).stream(0, Box::new(StreamResource(guest_end)));
    match rt.invoke(inv) {
        Ok(report) => {
            record.hypercalls = report.hypercalls;
            record.from_snapshot = report.from_snapshot;
            record.shell_id = Some(report.shell_id);
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    let _ = conn.shutdown(Shutdown::Both);
    record
}
