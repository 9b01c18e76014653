mod commands;
mod config;
mod source;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "mlock", version, about = "Lock model parameters to hardware fingerprints")]
pub struct Cli {
    /// Seed for every random choice; MLOCK_SEED takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Emit JSON on stdout.
    #[arg(long, global = true, conflicts_with = "csv")]
    pub json: bool,
    /// Emit CSV on stdout (curves, histograms).
    #[arg(long, global = true)]
    pub csv: bool,
    /// Diagnostics written to stderr.
    #[arg(long, global = true, value_enum, default_value = "warn")]
    pub log_level: LogLevel,
    /// TOML file with default flags, globally and per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
}

impl LogLevel {
    fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Off => log::LevelFilter::Off,
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Measure a hardware fingerprint.
    Fingerprint(FingerprintArgs),
    /// Train the toy classifier and save its parameters.
    Train(TrainArgs),
    /// Evaluate a parameter file, optionally pruned or quantized.
    Eval(EvalArgs),
    /// Lock a parameter file to a fingerprint.
    Lock(LockArgs),
    /// Recover parameters from a locked file.
    Unlock(UnlockArgs),
    /// Train a model that only works under the authorized pruning or quantization.
    Softlock(SoftlockArgs),
    /// Attack a soft-locked model by retraining or noise.
    Attack(AttackArgs),
    /// Brute-force the fingerprint of a locked file.
    Crack(CrackArgs),
    /// Distribution statistics and distinguisher verdicts.
    Stats(StatsArgs),
    /// Sparse matvec against masked-dense emulation.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FpMethod {
    Clock,
    Fp,
    Puf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AccumulationArg {
    Sequential,
    Reversed,
    Pairwise,
    Lanes8,
}

#[derive(Args, Debug, Clone)]
pub struct MeasureArgs {
    /// Serialized additions per clock trial.
    #[arg(long, default_value_t = 100_000)]
    pub iters: u64,
    /// Clock trials for the majority vote.
    #[arg(long, default_value_t = 7)]
    pub trials: usize,
    /// Divide elapsed ticks by this instead of by --iters.
    #[arg(long)]
    pub divisor: Option<u64>,
    /// Finite-precision probe depth.
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// Finite-precision probe width.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Native dtype of the finite-precision probe.
    #[arg(long, default_value = "fp32")]
    pub dtype: String,
    #[arg(long, value_enum, default_value = "lanes8")]
    pub accumulation: AccumulationArg,
    /// Raw SRAM dump; without it a synthetic device is simulated.
    #[arg(long)]
    pub puf_file: Option<PathBuf>,
    /// Fuzzy-extractor helper data (JSON). Created by enrolment if missing.
    #[arg(long)]
    pub helper: Option<PathBuf>,
    /// Repetition length of the fuzzy extractor.
    #[arg(long = "rep", default_value_t = 9)]
    pub repetition: usize,
    /// Bit error rate of the synthetic device.
    #[arg(long, default_value_t = 0.05)]
    pub error_rate: f64,
}

#[derive(Args, Debug)]
pub struct FingerprintArgs {
    #[arg(long, value_enum)]
    pub method: FpMethod,
    #[command(flatten)]
    pub measure: MeasureArgs,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Seed of the blob dataset.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_size: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub model: PathBuf,
    /// Prune this fraction of weights by magnitude first.
    #[arg(long)]
    pub prune: Option<f64>,
    /// Fake-quantize to this dtype first (fp32, fp16, mf16, mf8, int8).
    #[arg(long)]
    pub quant: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SourceArgs {
    /// Fingerprint symbols, optionally prefixed by the method (`clock:72100`).
    #[arg(long, group = "source")]
    pub fingerprint: Option<String>,
    /// Shell command whose stdout is the fingerprint.
    #[arg(long, group = "source")]
    pub fingerprint_cmd: Option<String>,
    /// Measure the fingerprint on this machine.
    #[arg(long, value_enum, group = "source")]
    pub measure: Option<FpMethod>,
    #[command(flatten)]
    pub measure_opts: MeasureArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PretransformArg {
    Gaussian,
    Empirical,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SaturationArg {
    Clamp,
    Reject,
}

#[derive(Args, Debug)]
pub struct LockArgs {
    pub model: PathBuf,
    /// aes, shuffle or pt-aes.
    #[arg(long)]
    pub method: String,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, value_enum, default_value = "empirical")]
    pub pretransform: PretransformArg,
    /// Out-of-range handling for the Gaussian pre-transform.
    #[arg(long, value_enum, default_value = "clamp")]
    pub saturation: SaturationArg,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct UnlockArgs {
    pub locked: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LockMode {
    Sparsity,
    Quant,
}

#[derive(Args, Debug, Clone)]
pub struct BranchArgs {
    #[arg(long, value_enum, default_value = "sparsity")]
    pub mode: LockMode,
    /// Authorized pruning fraction.
    #[arg(long, default_value_t = 0.0)]
    pub p1: f64,
    /// Unauthorized pruning fraction.
    #[arg(long, default_value_t = 0.5)]
    pub p2: f64,
    /// Authorized quantization scheme.
    #[arg(long, default_value = "fp32")]
    pub auth: String,
    /// Unauthorized quantization scheme.
    #[arg(long, default_value = "mf8")]
    pub unauth: String,
}

#[derive(Args, Debug)]
pub struct SoftlockArgs {
    pub model: PathBuf,
    #[command(flatten)]
    pub branches: BranchArgs,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 5.0)]
    pub epsilon: f64,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AttackKind {
    Retrain,
    Noise,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Side {
    Auth,
    Unauth,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub kind: AttackKind,
    #[command(flatten)]
    pub branches: BranchArgs,
    #[command(flatten)]
    pub train: TrainOpts,
    /// Comma-separated noise levels, relative to each tensor's std.
    #[arg(long, default_value = "0,0.01,0.03,0.1,0.3,1")]
    pub noise: String,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    /// Branch the noise attack is evaluated under.
    #[arg(long, value_enum, default_value = "unauth")]
    pub branch: Side,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct CrackArgs {
    pub locked: PathBuf,
    /// Size of the searched fingerprint space.
    #[arg(long)]
    pub bits: u32,
    /// stat (screen with the distinguisher) or acc (evaluate everything).
    #[arg(long, default_value = "stat")]
    pub strategy: String,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = mlock_core::distinguisher::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Parameter file describing the expected distribution. Defaults to
    /// what the locked file reveals, or a surrogate model for plain AES.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HistogramArg {
    Value,
    Byte,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Parameter (MLPS) or locked (MLCK) file.
    pub file: PathBuf,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = mlock_core::distinguisher::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Histogram written by --csv.
    #[arg(long, value_enum, default_value = "value")]
    pub histogram: HistogramArg,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 2048)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.995)]
    pub sparsity: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain { kind: &'static str, message: String },
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        CliError::Usage(m.into())
    }

    pub fn domain(kind: &'static str, m: impl std::fmt::Display) -> Self {
        CliError::Domain { kind, message: m.to_string() }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain { .. } => 1,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m.as_str()),
            CliError::Domain { kind, message } => (*kind, message.as_str()),
        };
        format!("mlock: error[{kind}]: {}", msg.replace('\n', " "))
    }
}

fn main() -> ExitCode {
    let names: Vec<String> = Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect();
    let args = match config::expand(std::env::args_os().collect(), &names) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{}", e.line());
            return ExitCode::from(e.code());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::from(if e.kind() == DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 });
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).line());
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level.filter())
        .format(|buf, rec| {
            use std::io::Write;
            writeln!(buf, "mlock: {}: {}", rec.level().as_str().to_lowercase(), rec.args())
        })
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}
