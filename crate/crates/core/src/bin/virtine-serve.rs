// SPDX-License-Identifier: Apache-2.0

//! `virtine-serve echo|http`: one virtine per connection.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use log::error;

use virtine::backend::mock::{programs, MockBackend};
use virtine::client::service::{serve_echo, serve_http, ServiceConfig};
use virtine::manifest::Manifest;
use virtine::{backend_by_name, BackendKind, ProcessorMode, ReleaseMode, VirtineImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Service {
    Echo,
    Http,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Hw,
    Mock,
}

#[derive(Debug, Parser)]
#[command(name = "virtine-serve", version, about = "Serve each connection from a fresh virtine")]
struct Args {
    service: Service,
    /// Document root; file hypercalls cannot leave it.
    #[arg(long, default_value = ".")]
    root: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    /// Pool capacity.
    #[arg(long, default_value_t = 16)]
    pool: usize,
    /// Clean released shells on a background thread.
    #[arg(long)]
    async_clean: bool,
    /// Never take or restore snapshots.
    #[arg(long)]
    no_snapshot: bool,
    #[arg(long, value_enum, default_value_t = BackendArg::Hw)]
    backend: BackendArg,
    /// Accepting threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Per-request wall-clock budget in milliseconds.
    #[arg(long, default_value_t = 1000)]
    timeout_ms: u64,
    /// Build manifest to take the guest image from.
    #[arg(long, requires = "workload")]
    manifest: Option<PathBuf>,
    /// Workload name in the manifest.
    #[arg(long, requires = "manifest")]
    workload: Option<String>,
}

fn image(args: &Args, kind: BackendKind) -> Result<VirtineImage, String> {
    if let (Some(path), Some(name)) = (&args.manifest, &args.workload) {
        let manifest = Manifest::load(path).map_err(|e| e.to_string())?;
        let entry = manifest.get(name).map_err(|e| e.to_string())?;
        return entry.image().map_err(|e| e.to_string());
    }
    match (args.service, kind) {
        (Service::Echo, BackendKind::Hardware) => Ok(VirtineImage::builtin("echo64").expect("builtin echo64")),
        (Service::Echo, BackendKind::Mock) => Ok(MockBackend::image(programs::ECHO, ProcessorMode::Long64, 64 << 10)),
        (Service::Http, BackendKind::Mock) => Ok(MockBackend::image(programs::HTTP, ProcessorMode::Long64, 1 << 20)),
        (Service::Http, BackendKind::Hardware) => {
            Err("no built-in HTTP guest for the hardware backend; pass --manifest and --workload".into())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let name = match args.backend {
        BackendArg::Hw => "hw",
        BackendArg::Mock => "mock",
    };
    let backend = match backend_by_name(name) {
        Ok(b) => b,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(2);
        }
    };
    let image = match image(&args, backend.kind()) {
        Ok(i) => i,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(2);
        }
    };
    let mut config = ServiceConfig::new(backend, image, &args.root);
    config.addr = SocketAddr::new(args.bind, args.port);
    config.pool_capacity = args.pool;
    config.release_mode = if args.async_clean {
        ReleaseMode::AsyncClean
    } else {
        ReleaseMode::SyncClean
    };
    config.snapshot = !args.no_snapshot;
    config.workers = args.threads;
    config.timeout = Duration::from_millis(args.timeout_ms);
    let started = match args.service {
        Service::Echo => serve_echo(config),
        Service::Http => serve_http(config),
    };
    match started {
        Ok(handle) => {
            println!("listening on {}", handle.addr());
            handle.join();
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
