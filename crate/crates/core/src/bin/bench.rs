use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use elastic_rdma::clock::ClockMode;
use elastic_rdma::harness::{
    bench_control_plane, bench_data_plane, read_results, requirement_check, write_results,
    BenchResult, DataOp, DataPlaneParams, Format, HarnessError, Mode,
};
use elastic_rdma::orchestrator::{ScenarioConfig, Scheme, StartKind};

#[derive(Parser)]
#[command(
    name = "bench",
    about = "Control-plane and data-plane benchmarks on the simulated fabric"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// End-to-end request time for cold, warm or fork starts.
    ControlPlane(ControlArgs),
    /// Throughput and latency of READ, WRITE or SEND/RECV.
    DataPlane(DataArgs),
    /// Applies the overhead rules to saved control-plane results.
    Check {
        /// Result files (CSV or JSON); repeat to combine several.
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StartArg {
    Cold,
    Warm,
    Fork,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Swift,
    Uncached,
    Kernel,
    Baseline,
    All,
}

impl SchemeArg {
    fn schemes(self, data_plane: bool) -> Vec<Scheme> {
        match self {
            SchemeArg::Swift => vec![Scheme::Swift],
            SchemeArg::Uncached => vec![Scheme::Uncached],
            SchemeArg::Kernel => vec![Scheme::KernelMediated],
            SchemeArg::Baseline => vec![Scheme::Baseline],
            SchemeArg::All if data_plane => {
                vec![Scheme::Swift, Scheme::Uncached, Scheme::KernelMediated]
            }
            SchemeArg::All => Scheme::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OpArg {
    Read,
    Write,
    SendRecv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sync,
    Async,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Virtual,
    Wall,
}

#[derive(Args)]
struct Common {
    /// Scenario or cost-model TOML; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write results; a summary goes to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format; guessed from the extension of --out when absent.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args)]
struct ControlArgs {
    #[arg(long, value_enum)]
    start: StartArg,
    #[arg(long, value_enum, default_value = "swift")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 10)]
    repeats: u32,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum)]
    op: OpArg,
    #[arg(long, value_enum, default_value = "sync")]
    mode: ModeArg,
    /// Client thread counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    threads: Vec<usize>,
    /// Seconds of (virtual) time per run.
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    #[arg(long, value_enum, default_value = "swift")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    /// Requests per batch in async mode.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Bytes per request.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, value_enum, default_value = "virtual")]
    clock: ClockArg,
    #[command(flatten)]
    common: Common,
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig, HarnessError> {
    match path {
        Some(p) => Ok(ScenarioConfig::load(p)?),
        None => Ok(ScenarioConfig::default()),
    }
}

fn save(results: &[BenchResult], common: &Common) -> Result<(), HarnessError> {
    let Some(out) = &common.out else {
        return Ok(());
    };
    let format = match common.format {
        Some(FormatArg::Csv) => Format::Csv,
        Some(FormatArg::Json) => Format::Json,
        None => Format::for_path(out),
    };
    write_results(results, format, out)?;
    eprintln!("wrote {} ({format})", out.display());
    Ok(())
}

fn control_plane(args: &ControlArgs) -> Result<(), HarnessError> {
    let config = load_config(args.common.config.as_deref())?;
    let starts = match args.start {
        StartArg::Cold => vec![StartKind::Cold],
        StartArg::Warm => vec![StartKind::Warm],
        StartArg::Fork => vec![StartKind::Fork],
        StartArg::All => StartKind::ALL.to_vec(),
    };
    let mut results = Vec::new();
    for scheme in args.scheme.schemes(false) {
        for &start in &starts {
            let r = bench_control_plane(&config, start, scheme, args.repeats, args.common.seed)?;
            if let Some(a) = r.aggregate() {
                println!(
                    "{:<9} {:<5} e2e {:>12.2}us  launch {:>12.2}us  visible {:>10.2}us  ({} runs)",
                    r.scheme,
                    start,
                    a.end_to_end_us.unwrap_or_default(),
                    a.task_launch_us.unwrap_or_default(),
                    a.visible_control_plane_us.unwrap_or_default(),
                    r.repeats
                );
            }
            results.push(r);
        }
    }
    save(&results, &args.common)
}

fn data_plane(args: &DataArgs) -> Result<(), HarnessError> {
    let config = load_config(args.common.config.as_deref())?;
    if !(args.duration.is_finite() && args.duration > 0.0) {
        return Err(HarnessError::ZeroDuration);
    }
    let mut results = Vec::new();
    for scheme in args.scheme.schemes(true) {
        for &threads in &args.threads {
            let params = DataPlaneParams {
                op: match args.op {
                    OpArg::Read => DataOp::Read,
                    OpArg::Write => DataOp::Write,
                    OpArg::SendRecv => DataOp::SendRecv,
                },
                mode: match args.mode {
                    ModeArg::Sync => Mode::Sync,
                    ModeArg::Async => Mode::Async,
                },
                threads,
                duration: Duration::from_secs_f64(args.duration),
                batch: args.batch,
                size: args.size,
                clock: match args.clock {
                    ClockArg::Virtual => ClockMode::Virtual,
                    ClockArg::Wall => ClockMode::Wall,
                },
            };
            let r = bench_data_plane(&config, scheme, &params, args.repeats, args.common.seed)?;
            if let Some(a) = r.aggregate() {
                println!(
                    "{:<9} {:<28} {:>14.0} ops/s  mean {:>8.3}us  p99 {:>8.3}us",
                    r.scheme,
                    r.scenario,
                    a.throughput_ops_s.unwrap_or_default(),
                    a.mean_latency_us.unwrap_or_default(),
                    a.p99_latency_us.unwrap_or_default()
                );
            }
            results.push(r);
        }
    }
    save(&results, &args.common)
}

fn check(inputs: &[PathBuf]) -> Result<bool, HarnessError> {
    let mut results = Vec::new();
    for p in inputs {
        results.extend(read_results(p)?);
    }
    let report = requirement_check(&results)?;
    print!("{report}");
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::ControlPlane(a) => control_plane(a).map(|_| true),
        Command::DataPlane(a) => data_plane(a).map(|_| true),
        Command::Check { inputs } => check(inputs),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
