//! `mbz`: replay traces through the engine, benchmark it, format reports.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O error.

use clap::{Parser, Subcommand, ValueEnum};
use mbz::bench::{run_bench, BenchError, BenchOptions};
use mbz::config::{load_config, ReportFormat, RunConfig};
use mbz::io::{ReplayConduit, Speed};
use mbz::replay::{replay_config, write_file, ReplayError};
use mbz::report::{extension, format_report, load_report, to_json, AnyReport, ReportError, RunReport};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "mbz", version, about = "Userspace middlebox engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Plotdata,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Plotdata => ReportFormat::Plotdata,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Drive a recorded trace through the engine on a virtual clock.
    Replay {
        #[arg(long)]
        config: PathBuf,
        /// Write every packet the engine emitted to this pcap.
        #[arg(long)]
        out_pcap: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; overrides the config. Without either, JSON goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure connect latency added by the engine over loopback.
    Bench {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
        /// Run observe-only plugins instead of an empty chain.
        #[arg(long)]
        with_plugins: bool,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a saved run or bench report in another format.
    Report {
        path: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Play a trace at recorded pace through real sockets.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// How long to wait for open flows after the trace ends, in seconds.
        #[arg(long, default_value_t = 5)]
        linger: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_CONFIG, message: e.to_string() }
    }

    fn io(e: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_IO, message: e.to_string() }
    }
}

impl From<ReplayError> for Failure {
    fn from(e: ReplayError) -> Self {
        if e.is_config_error() {
            Failure::config(e)
        } else {
            Failure::io(e)
        }
    }
}

fn config(path: &Path) -> Result<RunConfig, Failure> {
    load_config(path).map_err(|e| match e {
        mbz::config::ConfigError::Io { .. } => Failure::io(e),
        _ => Failure::config(e),
    })
}

fn write_run_report(cfg: &RunConfig, report: &RunReport, out: Option<PathBuf>) -> Result<(), Failure> {
    let Some(path) = out.or_else(|| cfg.report.path.clone()) else {
        print!("{}", to_json(report));
        return Ok(());
    };
    let any = AnyReport::Run(Box::new(report.clone()));
    let mut formats = cfg.report.formats.clone();
    if !formats.contains(&ReportFormat::Json) {
        formats.insert(0, ReportFormat::Json);
    }
    for f in formats {
        let p = if f == ReportFormat::Json { path.clone() } else { path.with_extension(extension(f)) };
        write_file(&p, format_report(&any, f).as_bytes())?;
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Replay { config: path, out_pcap, seed, out } => {
            let cfg = config(&path)?;
            let outcome = replay_config(&cfg, seed)?;
            write_run_report(&cfg, &outcome.report, out)?;
            if let Some(p) = out_pcap.or_else(|| cfg.report.pcap.clone()) {
                write_file(&p, &outcome.pcap_bytes(cfg.engine.mtu))?;
                log::info!("wrote {} packets to {}", outcome.emitted.len(), p.display());
            }
        }
        Command::Bench { n, concurrency, with_plugins, out } => {
            let r = run_bench(BenchOptions { n, concurrency, with_plugins }).map_err(|e| match e {
                BenchError::InsufficientSamples(_) => Failure::config(e),
                _ => Failure::io(e),
            })?;
            match out {
                Some(p) => {
                    print!("{}", r.table());
                    write_file(&p, to_json(&r).as_bytes())?;
                }
                None => {
                    eprint!("{}", r.table());
                    print!("{}", to_json(&r));
                }
            }
        }
        Command::Report { path, format } => {
            let r = load_report(&path).map_err(|e| match e {
                ReportError::Io(_) => Failure::io(format!("{}: {e}", path.display())),
                ReportError::BadReport(_) => Failure::io(format!("{}: {e}", path.display())),
            })?;
            print!("{}", format_report(&r, format.into()));
        }
        Command::Run { config: path, linger, out } => {
            let cfg = config(&path)?;
            let trace = mbz::replay::load_trace(&cfg)?;
            let mut conduit = ReplayConduit::new(trace, Speed::AsFastAsPossible).map_err(Failure::io)?;
            let outcome = mbz::live::run_live(&cfg, &mut conduit, Duration::from_secs(linger))?;
            write_run_report(&cfg, &outcome.report, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MBZ_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mbz: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
