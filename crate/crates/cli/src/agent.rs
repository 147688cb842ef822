use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use iort_core::client::{ClientError, TcpLink};
use iort_core::device_agent::{AgentConfig, Backoff, LinkError};
use iort_core::{DeviceAgent, SystemClock};

use crate::{load_profile, AgentArgs};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const BACKOFF_BASE_MS: u64 = 100;

pub fn run(args: AgentArgs) -> anyhow::Result<()> {
    let shutdown = Arc::new(AtomicBool::new(false));
    {
        let flag = shutdown.clone();
        ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
            .context("installing signal handler")?;
    }
    if !(args.speed_scale.is_finite() && args.speed_scale >= 0.0) {
        bail!("--speed-scale must be a non-negative number");
    }
    let mut config = AgentConfig::new(args.arm_id.clone(), load_profile(args.profile.as_ref())?);
    config.speed_scale = args.speed_scale;
    config.state_path = args.state_file.clone();
    let mut agent = DeviceAgent::new(config, Arc::new(SystemClock)).context("loading agent state")?;

    let seed = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
        ^ u64::from(std::process::id());
    let mut backoff = Backoff::new(BACKOFF_BASE_MS, args.retry_max_ms, seed);

    while !shutdown.load(Ordering::SeqCst) {
        match TcpLink::connect(&args.broker, &args.arm_id, CONNECT_TIMEOUT) {
            Ok(mut link) => {
                backoff.reset();
                tracing::info!(arm_id = %args.arm_id, broker = %args.broker, "connected");
                match agent.run(&mut link, &shutdown, 0) {
                    Ok(()) => break,
                    Err(LinkError::Conflict(m)) => bail!("arm {} refused: {m}", args.arm_id),
                    Err(e) => tracing::warn!(error = %e, "link lost"),
                }
            }
            Err(ClientError::Refused { code, message }) if code == "conflict" => {
                bail!("arm {} is already served by another agent: {message}", args.arm_id)
            }
            Err(ClientError::Refused { code, message }) => {
                bail!("broker refused registration ({code}): {message}")
            }
            Err(e) => {
                let delay = backoff.next_delay();
                tracing::warn!(
                    attempt = backoff.attempt(),
                    delay_ms = delay.as_millis() as u64,
                    error = %e,
                    "broker unreachable; retrying"
                );
                sleep_unless(&shutdown, delay);
            }
        }
    }
    tracing::info!(arm_id = %args.arm_id, motions = agent.motions(), "agent stopped");
    Ok(())
}

fn sleep_unless(flag: &AtomicBool, total: Duration) {
    let end = Instant::now() + total;
    while !flag.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= end {
            return;
        }
        std::thread::sleep((end - now).min(Duration::from_millis(50)));
    }
}
