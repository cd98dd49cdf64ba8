// SPDX-License-Identifier: Apache-2.0

use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use virtine::backend_by_name;
use virtine::manifest::Manifest;
use virtine_bench::checks::{self, Check};
use virtine_bench::experiments::{self, Config, Experiment};
use virtine_bench::measure::{self, Measurement, Unit};
use virtine_bench::stats::SummaryRow;
use virtine_bench::{plot, BenchError};

/// Exit status when the requested backend or guest image is missing.
const EXIT_UNAVAILABLE: u8 = 3;
/// Exit status under `--strict` when a check fails.
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "virtine-bench", version, about = "Virtine latency experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Context creation, cheapest to dearest.
    CreationLadder(RunArgs),
    /// Per-milestone cost of a cold boot.
    BootBreakdown(RunArgs),
    /// fib(20) in each processor mode.
    ModeLatency(RunArgs),
    /// fib(n) native, virtine and snapshot.
    Amortization(RunArgs),
    /// Start-up latency against image size.
    ImageSize(RunArgs),
    /// Static-file HTTP over loopback.
    Http(RunArgs),
    /// Every experiment in turn.
    All(RunArgs),
    /// Draw an SVG from a CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment to draw; the first cycle experiment otherwise.
        #[arg(long)]
        experiment: Option<String>,
    },
    /// Summarize a CSV and evaluate the checks.
    Summary {
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Hw,
    Mock,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, default_value_t = experiments::DEFAULT_TRIALS)]
    trials: usize,
    /// Write raw measurements here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write an SVG chart here (one per experiment under `all`).
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BackendArg::Hw)]
    backend: BackendArg,
    /// Build manifest with workload images beyond the builtins.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Exit with status 4 if any check fails.
    #[arg(long)]
    strict: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (which, args) = match cli.command {
        Command::CreationLadder(a) => (vec![Experiment::CreationLadder], a),
        Command::BootBreakdown(a) => (vec![Experiment::BootBreakdown], a),
        Command::ModeLatency(a) => (vec![Experiment::ModeLatency], a),
        Command::Amortization(a) => (vec![Experiment::Amortization], a),
        Command::ImageSize(a) => (vec![Experiment::ImageSize], a),
        Command::Http(a) => (vec![Experiment::Http], a),
        Command::All(a) => (Experiment::ALL.to_vec(), a),
        Command::Plot { csv, out, experiment } => return report(plot_csv(&csv, &out, experiment.as_deref())),
        Command::Summary { csv } => {
            return report(load(&csv).map(|rows| {
                print_report(&rows);
            }))
        }
    };
    run(&which, &args)
}

fn report(r: Result<(), BenchError>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("virtine-bench: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &Path) -> Result<Vec<Measurement>, BenchError> {
    measure::read_csv(BufReader::new(File::open(path)?))
}

fn run(which: &[Experiment], args: &RunArgs) -> ExitCode {
    let name = match args.backend {
        BackendArg::Hw => "hw",
        BackendArg::Mock => "mock",
    };
    let backend = match backend_by_name(name) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("virtine-bench: hardware backend unavailable: {e}");
            return ExitCode::from(EXIT_UNAVAILABLE);
        }
    };
    let mut cfg = Config::new(backend, args.trials);
    if !cfg.timer.pinned {
        warn!("could not pin the measuring thread; expect more noise");
    }
    info!("timer: {:?}", cfg.timer);
    if let Some(path) = &args.manifest {
        match Manifest::load(path) {
            Ok(m) => cfg.manifest = Some(m),
            Err(e) => {
                eprintln!("virtine-bench: {e}");
                return ExitCode::FAILURE;
            }
        }
    }

    let mut rows = Vec::new();
    let mut status = ExitCode::SUCCESS;
    for &e in which {
        eprintln!("running {e} ({} trials per variant)", args.trials);
        match e.run(&cfg) {
            Ok(r) => rows.extend(r),
            Err(err @ (BenchError::NeedsGuest { .. } | BenchError::NeedsHardware(..))) => {
                eprintln!("virtine-bench: {err}");
                status = ExitCode::from(EXIT_UNAVAILABLE);
            }
            Err(err) => {
                eprintln!("virtine-bench: {e}: {err}");
                return ExitCode::FAILURE;
            }
        }
    }
    if let Some(path) = &args.csv {
        let written = File::create(path)
            .map_err(BenchError::from)
            .and_then(|f| measure::write_csv(BufWriter::new(f), &rows));
        if let Err(e) = written {
            eprintln!("virtine-bench: {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
    }
    if let Some(path) = &args.plot {
        for (exp, unit) in measure::experiments(&rows).unwrap_or_default() {
            if unit != Unit::Cycles {
                continue;
            }
            let out = if which.len() == 1 {
                path.clone()
            } else {
                path.with_file_name(format!(
                    "{}-{exp}.svg",
                    path.file_stem().unwrap_or_default().to_string_lossy()
                ))
            };
            if let Err(e) = plot::summary_chart(&out, &exp, unit.as_str(), &checks::summaries(&rows, &exp)) {
                eprintln!("virtine-bench: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    let checks = print_report(&rows);
    if args.strict && checks.iter().any(|c| !c.pass) && status == ExitCode::SUCCESS {
        status = ExitCode::from(EXIT_CHECK_FAILED);
    }
    status
}

fn plot_csv(csv: &Path, out: &Path, experiment: Option<&str>) -> Result<(), BenchError> {
    let rows = load(csv)?;
    let exps = measure::experiments(&rows)?;
    let (exp, unit) = match experiment {
        Some(name) => exps
            .into_iter()
            .find(|(e, _)| e == name)
            .ok_or_else(|| BenchError::Format(format!("no experiment {name:?} in {}", csv.display())))?,
        None => exps
            .into_iter()
            .find(|(_, u)| *u == Unit::Cycles)
            .ok_or_else(|| BenchError::Format("no cycle experiment to plot".into()))?,
    };
    plot::summary_chart(out, &exp, unit.as_str(), &checks::summaries(&rows, &exp))
}

/// Print every experiment's summary table and the checks that apply to it.
fn print_report(rows: &[Measurement]) -> Vec<Check> {
    let exps = match measure::experiments(rows) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("virtine-bench: {e}");
            return Vec::new();
        }
    };
    let cycles_per_ns = ns_rate(rows);
    let mut all = Vec::new();
    let mut out = io::stdout().lock();
    for (exp, unit) in &exps {
        let summary = checks::summaries(rows, exp);
        print_table(&mut out, exp, *unit, &summary);
        if *unit != Unit::Cycles {
            continue;
        }
        let base = exp.strip_suffix("-mock").unwrap_or(exp);
        let mock = base.len() != exp.len();
        let found = match base {
            b if b == experiments::ladder::NAME && mock => vec![checks::ladder_mock(rows, exp)],
            b if b == experiments::ladder::NAME => checks::ladder(rows, exp),
            b if b == experiments::image_size::NAME && !mock => checks::image_size(rows, exp),
            b if b == experiments::modes::NAME && !mock => checks::modes(rows, exp),
            b if b == experiments::amortization::NAME && !mock => checks::amortization(rows, exp, cycles_per_ns),
            b if b == experiments::boot::NAME && !mock => checks::boot(rows, exp),
            b if b == experiments::http::NAME && !mock => checks::http(rows, exp),
            _ => Vec::new(),
        };
        for c in &found {
            use std::io::Write;
            let _ = writeln!(out, "{c}");
        }
        all.extend(found);
    }
    all
}

/// Cycles per nanosecond implied by paired cycle and `-ns` rows.
fn ns_rate(rows: &[Measurement]) -> f64 {
    let cyc = rows.iter().find(|m| m.unit == Unit::Cycles && m.value > 0.0);
    let Some(c) = cyc else { return 1.0 };
    let ns_exp = format!("{}{}", c.experiment, measure::NS_SUFFIX);
    rows.iter()
        .find(|m| m.experiment == ns_exp && m.variant == c.variant && m.trial == c.trial)
        .map_or(1.0, |n| c.value / n.value)
}

fn print_table(out: &mut impl io::Write, exp: &str, unit: Unit, rows: &[SummaryRow]) {
    let _ = writeln!(out, "\n== {exp} ({unit})");
    let _ = writeln!(
        out,
        "{:<24} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>5}",
        "variant", "n", "min", "p25", "median", "p75", "mean", "stddev", "out"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>12.1} {:>12.1} {:>12.1} {:>12.1} {:>12.1} {:>12.1} {:>5}",
            r.variant, r.count, r.min, r.p25, r.median, r.p75, r.mean, r.stddev, r.outlier_count
        );
    }
}
