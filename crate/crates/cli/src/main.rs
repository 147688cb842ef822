//! `iort`: broker server, device agent, operator tools and store inspection.

mod agent;
mod gateway;
mod inspect;
mod operator;
mod server;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use iort_core::broker::{BrokerConfig, DEFAULT_LEASE_MS};
use iort_core::pattern_store::StoreConfig;
use iort_core::ArmProfile;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "iort", version, about = "Networked control stack for a 5-DoF robot arm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the command broker.
    Broker {
        #[command(subcommand)]
        cmd: BrokerCmd,
    },
    /// Run a device agent for one arm.
    Agent {
        #[command(subcommand)]
        cmd: AgentCmd,
    },
    /// Send commands, replay scenarios, tail push events.
    Operator {
        #[command(subcommand)]
        cmd: OperatorCmd,
    },
    /// Inspect the pattern store recorded in a broker journal.
    Store {
        #[command(subcommand)]
        cmd: StoreCmd,
    },
    /// Print or validate an arm profile.
    Profile {
        #[command(subcommand)]
        cmd: ProfileCmd,
    },
}

#[derive(Debug, Subcommand)]
enum BrokerCmd {
    /// Serve the TCP stream endpoint and the HTTP/WebSocket gateway.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum AgentCmd {
    /// Connect to the broker and execute commands until interrupted.
    Run(AgentArgs),
}

#[derive(Debug, Subcommand)]
enum OperatorCmd {
    /// Send one command and print its ack.
    Send(SendArgs),
    /// Replay a scenario file.
    Script(ScriptArgs),
    /// Print push events as JSON lines.
    Watch(WatchArgs),
}

#[derive(Debug, Subcommand)]
enum StoreCmd {
    /// Print the canonical store snapshot.
    Dump(StoreArgs),
    /// Print node counts and learned patterns.
    Stats(StoreArgs),
}

#[derive(Debug, Subcommand)]
enum ProfileCmd {
    /// Print a profile as TOML (the built-in one by default).
    Dump {
        #[arg(long, env = "IORT_PROFILE")]
        profile: Option<PathBuf>,
    },
    /// Load and check a profile file.
    Check { file: PathBuf },
}

/// Settings shared by everything that hosts a broker.
#[derive(Debug, Clone, Args)]
pub struct BrokerOpts {
    /// Lease duration for delivered commands.
    #[arg(long, env = "IORT_LEASE_MS", default_value_t = DEFAULT_LEASE_MS,
          value_parser = clap::value_parser!(u64).range(1..))]
    pub lease_ms: u64,
    /// Successful repetitions before a sequence is promoted.
    #[arg(long, env = "IORT_PROMOTE_K", default_value_t = 3,
          value_parser = clap::value_parser!(u64).range(1..))]
    pub promote_k: u64,
    /// Silence that closes an operator's sequence.
    #[arg(long, env = "IORT_IDLE_GAP_S", default_value_t = 10.0)]
    pub idle_gap_s: f64,
    /// Shortest matched prefix that triggers a reuse prompt.
    #[arg(long, env = "IORT_MIN_PROMPT_PREFIX", default_value_t = 2,
          value_parser = clap::value_parser!(u64).range(1..))]
    pub min_prompt_prefix: u64,
    /// Arm profile (TOML) commands are validated against.
    #[arg(long, env = "IORT_PROFILE")]
    pub profile: Option<PathBuf>,
    /// Compact the journal after this many appends (0 disables).
    #[arg(long, env = "IORT_COMPACT_EVERY", default_value_t = 10_000)]
    pub compact_every: u64,
}

impl BrokerOpts {
    pub fn config(&self) -> anyhow::Result<BrokerConfig> {
        if !(self.idle_gap_s.is_finite() && self.idle_gap_s > 0.0) {
            anyhow::bail!("--idle-gap-s must be a positive number");
        }
        Ok(BrokerConfig {
            lease_ms: self.lease_ms,
            store: StoreConfig {
                promote_k: self.promote_k as usize,
                idle_gap_ms: (self.idle_gap_s * 1000.0).round() as u64,
                min_prompt_prefix: self.min_prompt_prefix as usize,
            },
            compact_every: self.compact_every,
            profile: load_profile(self.profile.as_ref())?,
        })
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to bind both listeners to.
    #[arg(long, env = "IORT_HOST", default_value = "127.0.0.1")]
    pub host: String,
    /// TCP stream endpoint port (0 picks a free port).
    #[arg(long, env = "IORT_PORT", default_value_t = 7450)]
    pub port: u16,
    /// HTTP/WebSocket gateway port (0 picks a free port).
    #[arg(long, env = "IORT_HTTP_PORT", default_value_t = 7451)]
    pub http_port: u16,
    /// Journal file; state is recovered from it on start. Without it the broker keeps nothing.
    #[arg(long, env = "IORT_JOURNAL")]
    pub journal: Option<PathBuf>,
    /// Skip fsync after each journal append.
    #[arg(long, env = "IORT_NO_FSYNC")]
    pub no_fsync: bool,
    #[command(flatten)]
    pub broker: BrokerOpts,
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    #[arg(long, env = "IORT_ARM_ID")]
    pub arm_id: String,
    #[arg(long, env = "IORT_PROFILE")]
    pub profile: Option<PathBuf>,
    /// Broker stream endpoint.
    #[arg(long, env = "IORT_BROKER", default_value = "127.0.0.1:7450")]
    pub broker: String,
    /// Multiplies motion durations; 0 moves instantly.
    #[arg(long, env = "IORT_SPEED_SCALE", default_value_t = 1.0)]
    pub speed_scale: f64,
    /// Persist pose and recent command ids here across restarts.
    #[arg(long, env = "IORT_STATE_FILE")]
    pub state_file: Option<PathBuf>,
    /// Upper bound of the reconnect backoff.
    #[arg(long, env = "IORT_RETRY_MAX_MS", default_value_t = 5_000)]
    pub retry_max_ms: u64,
}

#[derive(Debug, Args)]
pub struct SendArgs {
    #[arg(long, env = "IORT_BROKER", default_value = "127.0.0.1:7450")]
    pub broker: String,
    #[arg(long, env = "IORT_ARM")]
    pub arm: String,
    /// Five joint angles in degrees: base,shoulder,elbow,wrist_pitch,wrist_roll.
    #[arg(long, env = "IORT_ANGLES", value_parser = parse_angles, allow_hyphen_values = true)]
    pub angles: Angles,
    /// Gripper aperture in mm.
    #[arg(long, env = "IORT_GRIPPER", default_value_t = 0.0)]
    pub gripper: f64,
    #[arg(long, env = "IORT_OPERATOR", default_value = "cli")]
    pub operator: String,
    /// How long to wait for the ack.
    #[arg(long, env = "IORT_TIMEOUT_MS", default_value_t = 30_000)]
    pub timeout_ms: u64,
}

#[derive(Debug, Args)]
pub struct ScriptArgs {
    /// Scenario file (JSON lines).
    pub file: PathBuf,
    /// Run against a live broker instead of an embedded one.
    #[arg(long, env = "IORT_BROKER", conflicts_with_all = ["sim_clock", "journal"])]
    pub broker: Option<String>,
    /// Drive the embedded broker and agents on simulated time.
    #[arg(long, env = "IORT_SIM_CLOCK")]
    pub sim_clock: bool,
    /// Seed for command ids and fault injection.
    #[arg(long, env = "IORT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Journal file for the embedded broker.
    #[arg(long, env = "IORT_JOURNAL")]
    pub journal: Option<PathBuf>,
    /// Write the final store snapshot here (embedded broker only).
    #[arg(long, env = "IORT_SNAPSHOT", conflicts_with = "broker")]
    pub snapshot: Option<PathBuf>,
    /// How long a remote drain may wait for outstanding acks.
    #[arg(long, env = "IORT_TIMEOUT_MS", default_value_t = 30_000)]
    pub timeout_ms: u64,
    #[command(flatten)]
    pub broker_opts: BrokerOpts,
}

#[derive(Debug, Args)]
pub struct WatchArgs {
    #[arg(long, env = "IORT_BROKER", default_value = "127.0.0.1:7450")]
    pub broker: String,
    /// Comma-separated topic patterns; `*` matches one segment, `#` the rest.
    #[arg(long, env = "IORT_TOPICS", default_value = "#")]
    pub topics: String,
    #[arg(long, env = "IORT_CLIENT", default_value = "watch")]
    pub client: String,
    /// Exit after this many events.
    #[arg(long, env = "IORT_COUNT")]
    pub count: Option<usize>,
    /// Exit after this long.
    #[arg(long, env = "IORT_TIMEOUT_MS")]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    #[arg(long, env = "IORT_JOURNAL")]
    pub journal: PathBuf,
    #[command(flatten)]
    pub broker: BrokerOpts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Angles(pub [f64; 5]);

fn parse_angles(s: &str) -> Result<Angles, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(format!("expected 5 comma-separated angles, got {}", parts.len()));
    }
    let mut out = [0.0; 5];
    for (slot, p) in out.iter_mut().zip(&parts) {
        let v: f64 = p.parse().map_err(|_| format!("`{p}` is not a number"))?;
        if !v.is_finite() {
            return Err(format!("`{p}` is not finite"));
        }
        *slot = v;
    }
    Ok(Angles(out))
}

pub fn load_profile(path: Option<&PathBuf>) -> anyhow::Result<ArmProfile> {
    match path {
        Some(p) => ArmProfile::load(p).with_context(|| format!("loading profile {}", p.display())),
        None => Ok(ArmProfile::default()),
    }
}

fn init_logging(default: &str) {
    let filter = EnvFilter::try_from_env("IORT_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Broker {
            cmd: BrokerCmd::Serve(args),
        } => {
            init_logging("info");
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(args))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Agent {
            cmd: AgentCmd::Run(args),
        } => {
            init_logging("info");
            agent::run(args)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Operator { cmd } => {
            init_logging("warn");
            match cmd {
                OperatorCmd::Send(args) => operator::send(args),
                OperatorCmd::Script(args) => operator::script(args),
                OperatorCmd::Watch(args) => operator::watch(args),
            }
        }
        Command::Store { cmd } => {
            init_logging("warn");
            match cmd {
                StoreCmd::Dump(args) => inspect::store_dump(args)?,
                StoreCmd::Stats(args) => inspect::store_stats(args)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Profile { cmd } => {
            init_logging("warn");
            match cmd {
                ProfileCmd::Dump { profile } => inspect::profile_dump(profile.as_ref())?,
                ProfileCmd::Check { file } => inspect::profile_check(&file)?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
