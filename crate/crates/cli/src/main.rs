use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Exit code for bad flags, config files and missing or malformed inputs.
const EXIT_CONFIG: u8 = 2;
/// Exit code for failures while running, including protocol errors.
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "avatar-offload", version, about = "Frequency-partitioned avatar offloading experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to the working directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

impl Global {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic labeled texture corpus.
    GenCorpus {
        /// Corpus spec TOML; defaults to the `[corpus]` config section.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Rank frequency components by energy.
    Rank {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        block: Option<usize>,
        #[arg(long, value_enum, default_value_t = Statistic::Variance)]
        statistic: Statistic,
    },
    /// Train the local and offloaded codecs for a partition.
    TrainCodec {
        #[arg(long)]
        corpus: PathBuf,
        /// Number of offloaded components.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        #[arg(long)]
        block: Option<usize>,
        /// Offload every component including the base.
        #[arg(long)]
        full_offload: bool,
    },
    /// Profile offloaded latents and calibrate release noise.
    Calibrate {
        /// `plan.json` of a trained model directory.
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = Noise::Damp)]
        noise: Noise,
        /// Mutual information budget in nats.
        #[arg(long)]
        v: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Map between MI budgets and posterior success bounds.
    Bound {
        #[arg(long, conflicts_with = "psr")]
        v: Option<f64>,
        #[arg(long)]
        psr: Option<f64>,
        #[arg(long, default_value_t = 65)]
        classes: usize,
    },
    /// Sweep offloaded component counts and budgets.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        /// Hardware profile TOML.
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Evaluate attackers against noisy offloaded latents.
    Attack {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = Who::Both)]
        attacker: Who,
    },
    /// Latency, throughput and energy table.
    Perf {
        #[arg(long)]
        device: Option<String>,
        /// Device running the offloaded path.
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        link: Option<String>,
        #[arg(long)]
        workload: Option<String>,
        /// Offloaded counts to tabulate instead of the workload's own.
        #[arg(long, value_delimiter = ',')]
        ms: Vec<usize>,
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Host offloaded decoding over TCP.
    Serve {
        #[arg(long)]
        listen: String,
        /// Offloaded codec file(s).
        #[arg(long, required = true)]
        codec: Vec<PathBuf>,
        /// Exit after this many sessions.
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long, default_value_t = 30_000)]
        idle_timeout_ms: u64,
    },
    /// Run a client session against a host.
    Offload {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Corpus directory holding the frames to send.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 5_000)]
        timeout_ms: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Statistic {
    Variance,
    MeanSquare,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Noise {
    None,
    Damp,
    Iso,
    Dp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Who {
    Both,
    Empirical,
    Nn,
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }
}

impl From<avatar_offload::Error> for Failure {
    fn from(e: avatar_offload::Error) -> Self {
        match e {
            avatar_offload::Error::InvalidArgument(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).format_target(false).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
