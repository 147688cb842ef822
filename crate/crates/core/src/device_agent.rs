//! Robot-side agent: pulls commands, simulates the motion on the arm model,
//! and reports completion.
//!
//! Commands are deduplicated by id over a bounded window so a redelivered
//! command is acknowledged again without moving the arm a second time.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm_model::{config_at, forward_kinematics, plan_motion, ArmProfile, JointConfig};
use crate::broker::{command_queue, Broker, BrokerError, SessionId};
use crate::clock::Clock;
use crate::protocol::{validate_command, Ack, ClientKind, JointCommand, Message};

pub const DEDUP_WINDOW: usize = 10_000;

/// Default spacing of trajectory samples during a motion.
pub const SAMPLE_INTERVAL_US: u64 = 20_000;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("connection closed")]
    Closed,
    #[error("conflict: {0}")]
    Conflict(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Command handed to the agent, with whatever the link needs to complete it.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkDelivery {
    pub record_id: Option<u64>,
    pub delivery_count: u64,
    pub command: JointCommand,
}

/// Where commands come from and where acks go.
pub trait CommandLink {
    /// Next command, or `None` when nothing is ready right now.
    fn next_command(&mut self) -> Result<Option<LinkDelivery>, LinkError>;
    /// Sends the ack and completes the queue record.
    fn complete(&mut self, delivery: &LinkDelivery, ack: &Ack) -> Result<(), LinkError>;
}

/// Link to a broker in the same process.
pub struct InProcessLink {
    broker: Arc<Mutex<Broker>>,
    arm_id: String,
    session: SessionId,
    consumer: String,
    lease_ms: u64,
}

impl InProcessLink {
    pub fn connect(broker: Arc<Mutex<Broker>>, arm_id: &str) -> Result<Self, LinkError> {
        let (session, consumer, lease_ms) = {
            let mut b = broker.lock().expect("broker lock");
            let session = b.register(ClientKind::Robot, arm_id).map_err(|e| match e {
                BrokerError::Conflict(m) => LinkError::Conflict(m),
                other => LinkError::Broker(other),
            })?;
            let consumer = b.consumer_id(session).expect("session just registered");
            (session, consumer, b.config().lease_ms)
        };
        Ok(Self {
            broker,
            arm_id: arm_id.to_string(),
            session,
            consumer,
            lease_ms,
        })
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    /// Drops the session without acking anything, like a crashed process.
    pub fn disconnect(self) {
        let _ = self.broker.lock().expect("broker lock").disconnect(self.session);
    }
}

impl CommandLink for InProcessLink {
    fn next_command(&mut self) -> Result<Option<LinkDelivery>, LinkError> {
        let mut b = self.broker.lock().expect("broker lock");
        let Some(d) = b.next(&command_queue(&self.arm_id), &self.consumer, self.lease_ms)? else {
            return Ok(None);
        };
        match d.message {
            Message::Command(command) => Ok(Some(LinkDelivery {
                record_id: Some(d.record_id),
                delivery_count: d.delivery_count,
                command,
            })),
            other => {
                // not ours to execute; complete it so it does not block the queue
                tracing::warn!(kind = other.type_name(), "non-command record on command queue");
                b.ack_record(&d.queue, &self.consumer, d.record_id)?;
                Ok(None)
            }
        }
    }

    fn complete(&mut self, delivery: &LinkDelivery, ack: &Ack) -> Result<(), LinkError> {
        let mut b = self.broker.lock().expect("broker lock");
        b.route_ack(&self.arm_id, ack.clone())?;
        if let Some(rid) = delivery.record_id {
            if let Err(e) = b.ack_record(&command_queue(&self.arm_id), &self.consumer, rid) {
                // the record will come back; the dedup window answers it then
                tracing::warn!(%e, "late queue ack");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub arm_id: String,
    pub profile: ArmProfile,
    /// Multiplies motion durations; 0 executes instantly.
    pub speed_scale: f64,
    pub dedup_capacity: usize,
    pub sample_interval_us: u64,
    /// File the agent persists its pose and dedup window to after every
    /// command, so a restarted agent keeps deduplicating.
    pub state_path: Option<PathBuf>,
    /// Skip local validation (test hook for exercising the reject path when
    /// the broker has already let a command through).
    pub validate: bool,
}

impl AgentConfig {
    pub fn new(arm_id: impl Into<String>, profile: ArmProfile) -> Self {
        Self {
            arm_id: arm_id.into(),
            profile,
            speed_scale: 1.0,
            dedup_capacity: DEDUP_WINDOW,
            sample_interval_us: SAMPLE_INTERVAL_US,
            state_path: None,
            validate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedEntry {
    pub command_id: String,
    pub ack: Ack,
}

/// Persistent agent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub arm_id: String,
    pub current: JointConfig,
    /// Oldest first.
    pub executed: Vec<ExecutedEntry>,
}

#[derive(Debug, Default)]
struct DedupWindow {
    order: VecDeque<String>,
    acks: HashMap<String, Ack>,
}

impl DedupWindow {
    fn get(&self, id: &str) -> Option<&Ack> {
        self.acks.get(id)
    }

    fn insert(&mut self, id: String, ack: Ack, capacity: usize) {
        if self.acks.insert(id.clone(), ack).is_none() {
            self.order.push_back(id);
        }
        while self.order.len() > capacity.max(1) {
            if let Some(old) = self.order.pop_front() {
                self.acks.remove(&old);
            }
        }
    }
}

/// Result of handling one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub ack: Ack,
    /// The id was in the dedup window; the stored ack was returned and the
    /// arm did not move.
    pub duplicate: bool,
    /// Simulated motion time, in microseconds.
    pub duration_us: u64,
}

type SampleHook = Box<dyn FnMut(u64, &JointConfig) + Send>;

pub struct DeviceAgent {
    config: AgentConfig,
    clock: Arc<dyn Clock>,
    current: JointConfig,
    dedup: DedupWindow,
    motions: u64,
    on_sample: Option<SampleHook>,
}

impl std::fmt::Debug for DeviceAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceAgent")
            .field("arm_id", &self.config.arm_id)
            .field("current", &self.current)
            .field("motions", &self.motions)
            .finish()
    }
}

impl DeviceAgent {
    /// Starts at the all-zero pose with the gripper closed, or from the
    /// state file when one exists.
    pub fn new(config: AgentConfig, clock: Arc<dyn Clock>) -> std::io::Result<Self> {
        let mut agent = Self {
            config,
            clock,
            current: JointConfig::default(),
            dedup: DedupWindow::default(),
            motions: 0,
            on_sample: None,
        };
        if let Some(path) = agent.config.state_path.clone() {
            if path.exists() {
                let text = std::fs::read_to_string(&path)?;
                let state: AgentState = serde_json::from_str(&text)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                agent.load_state(state);
            }
        }
        Ok(agent)
    }

    pub fn arm_id(&self) -> &str {
        &self.config.arm_id
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn current(&self) -> JointConfig {
        self.current
    }

    /// Motions actually performed by this instance (duplicates excluded).
    pub fn motions(&self) -> u64 {
        self.motions
    }

    pub fn has_executed(&self, command_id: &str) -> bool {
        self.dedup.get(command_id).is_some()
    }

    /// Called with (elapsed µs, configuration) at every trajectory sample.
    pub fn on_sample(&mut self, hook: impl FnMut(u64, &JointConfig) + Send + 'static) {
        self.on_sample = Some(Box::new(hook));
    }

    pub fn state(&self) -> AgentState {
        AgentState {
            arm_id: self.config.arm_id.clone(),
            current: self.current,
            executed: self
                .dedup
                .order
                .iter()
                .map(|id| ExecutedEntry {
                    command_id: id.clone(),
                    ack: self.dedup.acks[id].clone(),
                })
                .collect(),
        }
    }

    pub fn load_state(&mut self, state: AgentState) {
        self.current = state.current;
        self.dedup = DedupWindow::default();
        for e in state.executed {
            self.dedup
                .insert(e.command_id, e.ack, self.config.dedup_capacity);
        }
    }

    fn persist(&self) -> std::io::Result<()> {
        let Some(path) = &self.config.state_path else {
            return Ok(());
        };
        write_atomic(path, &serde_json::to_vec(&self.state())?)
    }

    /// Handles one command: validate, move, ack. The simulated motion takes
    /// exactly the planned duration (times `speed_scale`) on the clock.
    pub fn execute_one(&mut self, cmd: &JointCommand) -> Execution {
        if let Some(ack) = self.dedup.get(&cmd.id) {
            tracing::debug!(command_id = %cmd.id, "duplicate command; re-sending ack");
            return Execution {
                ack: ack.clone(),
                duplicate: true,
                duration_us: 0,
            };
        }
        let (ack, duration_us) = self.perform(cmd);
        self.dedup
            .insert(cmd.id.clone(), ack.clone(), self.config.dedup_capacity);
        if let Err(e) = self.persist() {
            tracing::error!(%e, "cannot persist agent state");
        }
        Execution {
            ack,
            duplicate: false,
            duration_us,
        }
    }

    fn perform(&mut self, cmd: &JointCommand) -> (Ack, u64) {
        if cmd.arm_id != self.config.arm_id {
            let detail = format!("command for arm {} sent to {}", cmd.arm_id, self.config.arm_id);
            return (Ack::rejected(&cmd.id, detail, self.clock.now_ms()), 0);
        }
        if self.config.validate {
            let v = validate_command(cmd, &self.config.profile);
            if !v.is_ok() {
                return (Ack::rejected(&cmd.id, v.summary(), self.clock.now_ms()), 0);
            }
        }
        let plan = match plan_motion(&self.current, &cmd.target, &self.config.profile) {
            Ok(plan) => plan,
            Err(e) => return (Ack::rejected(&cmd.id, e.to_string(), self.clock.now_ms()), 0),
        };
        let total_us = scaled(plan.duration_us, self.config.speed_scale);
        tracing::info!(command_id = %cmd.id, duration_us = total_us, "motion started");
        let step = self.config.sample_interval_us.max(1);
        let mut elapsed = 0u64;
        while elapsed < total_us {
            let piece = step.min(total_us - elapsed);
            self.clock.sleep_us(piece);
            elapsed += piece;
            if let Some(hook) = self.on_sample.as_mut() {
                let t = plan.duration_s * elapsed as f64 / total_us as f64;
                let q = config_at(&plan, t).expect("t is non-negative");
                hook(elapsed, &q);
            }
        }
        self.current = cmd.target;
        self.motions += 1;
        let pose = forward_kinematics(&self.current, &self.config.profile)
            .expect("validated target is finite");
        tracing::info!(command_id = %cmd.id, "motion complete");
        (Ack::ok(&cmd.id, pose, self.clock.now_ms()), total_us)
    }

    /// Serves `link` until `shutdown` is set. The flag is only checked
    /// between commands, so a motion in progress always completes and is
    /// acknowledged. `idle_us` is the poll delay when no command is ready.
    pub fn run(
        &mut self,
        link: &mut dyn CommandLink,
        shutdown: &AtomicBool,
        idle_us: u64,
    ) -> Result<(), LinkError> {
        while !shutdown.load(Ordering::SeqCst) {
            if !self.step(link)? {
                self.clock.sleep_us(idle_us);
            }
        }
        Ok(())
    }

    /// Takes and completes at most one command. Returns whether one was ready.
    pub fn step(&mut self, link: &mut dyn CommandLink) -> Result<bool, LinkError> {
        let Some(delivery) = link.next_command()? else {
            return Ok(false);
        };
        let ex = self.execute_one(&delivery.command);
        link.complete(&delivery, &ex.ack)?;
        Ok(true)
    }
}

fn scaled(us: u64, scale: f64) -> u64 {
    if scale == 1.0 {
        us
    } else if scale.is_finite() && scale > 0.0 {
        (us as f64 * scale).round() as u64
    } else {
        0
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)
}

/// Exponential backoff with full jitter: attempt `n` waits a uniform time in
/// `[0, min(max, base * 2^n)]`.
#[derive(Debug)]
pub struct Backoff {
    base_ms: u64,
    max_ms: u64,
    attempt: u32,
    rng: ChaCha8Rng,
}

impl Backoff {
    pub fn new(base_ms: u64, max_ms: u64, seed: u64) -> Self {
        Self {
            base_ms: base_ms.max(1),
            max_ms: max_ms.max(1),
            attempt: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_delay(&mut self) -> Duration {
        let cap = self
            .base_ms
            .saturating_mul(1u64 << self.attempt.min(20))
            .min(self.max_ms);
        self.attempt = self.attempt.saturating_add(1);
        Duration::from_millis(self.rng.random_range(0..=cap))
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }
}
