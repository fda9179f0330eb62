//! `qkdbench`: attenuation sweeps, Monte Carlo runs, timetag analysis,
//! side-channel audits and intensity optimization.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "qkdbench", version, about = "Decoy-state BB84 faint-pulse QKD simulator")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytic gains, QBER, decoy bounds and key rates over an attenuation range.
    Sweep(SweepArgs),
    /// Monte Carlo run with optional timetag stream output.
    Simulate(SimulateArgs),
    /// Phase recovery, gating, sifting and key-rate estimation on a .ttag file.
    AnalyzeTtags(AnalyzeArgs),
    /// Mutual-information leakage of pulse-shape side channels.
    Sidechannel(SidechannelArgs),
    /// Grid search for the signal and decoy intensities maximizing the key rate.
    Optimize(OptimizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Text,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub atten_min: f64,
    #[arg(long, default_value_t = 40.0)]
    pub atten_max: f64,
    #[arg(long, default_value_t = 1.0)]
    pub atten_step: f64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Summary file. With --emit-ttags, the stream, sidecar and Alice log are
    /// written next to it as <stem>.ttag, <stem>.sidecar.toml, <stem>.alice.csv.
    #[arg(long, default_value = "run.toml")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000_000)]
    pub frames: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub emit_ttags: bool,
    /// Override the link attenuation of the config (dB).
    #[arg(long)]
    pub atten: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Timetag stream written by `simulate --emit-ttags` or an acquisition.
    pub ttag: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Alice's log; defaults to <stem>.alice.csv.
    #[arg(long)]
    pub alice: Option<PathBuf>,
    /// Acquisition sidecar; defaults to <stem>.sidecar.toml.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Software gating window; defaults to the config value.
    #[arg(long)]
    pub window_ns: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct SidechannelArgs {
    /// Temporal profiles CSV (axis,stateH,stateV,stateD,stateA).
    #[arg(long, conflicts_with = "synth")]
    pub profiles: Option<PathBuf>,
    /// Spectral profiles CSV, same layout.
    #[arg(long, conflicts_with = "synth")]
    pub spectral_profiles: Option<PathBuf>,
    /// Use synthetic Gaussian profiles instead of measured ones.
    #[arg(long)]
    pub synth: bool,
    #[arg(long, default_value_t = 400.0, requires = "synth")]
    pub fwhm_ps: f64,
    #[arg(long, default_value_t = 0.56, requires = "synth")]
    pub tbp: f64,
    /// ASE pedestal per state H,V,D,A as a fraction of the peak.
    #[arg(long, value_delimiter = ',', requires = "synth")]
    pub pedestal: Option<Vec<f64>>,
    /// Temporal shift per state H,V,D,A (ps).
    #[arg(long, value_delimiter = ',', requires = "synth")]
    pub time_shift_ps: Option<Vec<f64>>,
    /// Spectral shift per state H,V,D,A (GHz).
    #[arg(long, value_delimiter = ',', requires = "synth")]
    pub freq_shift_ghz: Option<Vec<f64>>,
    /// Subtract a constant floor estimated from this many edge bins first.
    #[arg(long)]
    pub remove_pedestal: Option<usize>,
    #[arg(long, default_value_t = qkdbench_core::sidechannel::DEFAULT_SPATIAL_LEAKAGE)]
    pub spatial: f64,
    /// Config supplying the state prior and protocol parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sweep CSV to which a leakage-adjusted rate column is added.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid step for both μ and ν₁.
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status contract: 2 usage or configuration, 3 I/O.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) => m,
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("QKDBENCH_THREADS") else {
        return Ok(());
    };
    let n = value
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("QKDBENCH_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot configure thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Sweep(a) => commands::sweep(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::AnalyzeTtags(a) => commands::analyze_ttags(a),
        Command::Sidechannel(a) => commands::sidechannel(a),
        Command::Optimize(a) => commands::optimize(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
