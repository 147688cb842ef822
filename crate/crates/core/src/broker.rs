//! Command broker: per-arm durable queues, lease-based at-least-once
//! delivery, ack routing into the learning store, and best-effort push.
//!
//! Each registered arm gets two independent FIFO queues: `cmd.<arm>` carries
//! operator commands to the robot and `ack.<arm>` carries completion reports
//! back. A consumer takes the oldest ready record under a time-bounded lease;
//! if the lease runs out before the consumer acknowledges, the record becomes
//! ready again and is redelivered with a higher `delivery_count`. Robots
//! deduplicate by command id, which turns redelivery into effectively-once
//! execution.
//!
//! Every durable mutation is journaled (write-ahead) before it is applied.
//! [`Broker::recover`] replays a journal through the same apply path.
//!
//! `Broker` is a plain single-threaded state machine; servers share it behind
//! a mutex, which serialises all queue and store mutations. Push sinks must
//! not block.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use uuid::Uuid;

use crate::arm_model::{ArmProfile, CartesianPose, JointConfig, Violation};
use crate::clock::Clock;
use crate::journal::{Journal, JournalError, JournalRecord, MintedCommand};
use crate::pattern_store::{
    CloseReason, CommandSequence, LearnedPattern, Outcome, PatternStore, PromptError, StoreConfig,
    StoreTree,
};
use crate::protocol::{
    validate_command, Ack, AckStatus, ClientKind, JointCommand, Message, Notification,
    PatternPrompt, PatternResponse,
};

pub const DEFAULT_LEASE_MS: u64 = 30_000;

/// Namespace for ids minted when a reuse prompt is accepted.
const MINT_NAMESPACE: Uuid = Uuid::from_u128(0x6a0f_52f4_7c1e_4b8e_9f3d_1c2b_5e7a_0d11);

pub fn command_queue(arm_id: &str) -> String {
    format!("cmd.{arm_id}")
}

pub fn ack_queue(arm_id: &str) -> String {
    format!("ack.{arm_id}")
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub lease_ms: u64,
    pub store: StoreConfig,
    /// Compact the journal after this many appends; 0 disables compaction.
    pub compact_every: u64,
    /// Limits every submitted command is validated against.
    pub profile: ArmProfile,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            lease_ms: DEFAULT_LEASE_MS,
            store: StoreConfig::default(),
            compact_every: 10_000,
            profile: ArmProfile::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("command rejected: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Rejected(Vec<Violation>),
    #[error("lease error on {queue} record {record_id}: {reason}")]
    Lease {
        queue: String,
        record_id: u64,
        reason: String,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("invalid request: {0}")]
    Invalid(String),
}

pub type SessionId = u64;
pub type SubscriptionId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordState {
    Ready,
    Leased,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lease {
    pub consumer_id: String,
    pub expiry_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueRecord {
    pub record_id: u64,
    pub message: Message,
    pub enqueued_at_ms: u64,
    pub delivery_count: u64,
    pub lease: Option<Lease>,
    pub state: RecordState,
}

/// Active records of one queue in enqueue order. Done records are removed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Queue {
    pub name: String,
    pub records: VecDeque<QueueRecord>,
}

impl Queue {
    fn new(name: String) -> Self {
        Self {
            name,
            records: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn find_mut(&mut self, record_id: u64) -> Option<&mut QueueRecord> {
        self.records.iter_mut().find(|r| r.record_id == record_id)
    }

    fn expire_leases(&mut self, now_ms: u64) {
        for r in self.records.iter_mut() {
            if r.state == RecordState::Leased
                && r.lease.as_ref().is_some_and(|l| l.expiry_ms <= now_ms)
            {
                r.state = RecordState::Ready;
                r.lease = None;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Receipt {
    pub queue: String,
    pub record_id: u64,
    /// 1-based position in the queue's active records right after enqueue.
    pub position: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub queue: String,
    pub record_id: u64,
    pub message: Message,
    pub delivery_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub receipt: Receipt,
    pub prompt: Option<PatternPrompt>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteOutcome {
    Routed,
    /// No pending command with that id; the ack was dropped.
    Dropped,
}

/// Receiving end of a push subscription. Returns `false` once the
/// subscriber is gone; it is then removed.
pub trait PushSink: Send {
    fn push(&self, msg: &Message) -> bool;
}

impl PushSink for std::sync::mpsc::Sender<Message> {
    fn push(&self, msg: &Message) -> bool {
        self.send(msg.clone()).is_ok()
    }
}

impl<F> PushSink for F
where
    F: Fn(&Message) -> bool + Send,
{
    fn push(&self, msg: &Message) -> bool {
        self(msg)
    }
}

struct Subscription {
    id: SubscriptionId,
    client_id: String,
    topics: Vec<String>,
    sink: Box<dyn PushSink>,
}

/// Dot-separated topic match. `*` matches one segment, a trailing `#`
/// matches any remainder (including nothing).
pub fn topic_matches(pattern: &str, topic: &str) -> bool {
    let mut pat = pattern.split('.');
    let mut top = topic.split('.');
    loop {
        match (pat.next(), top.next()) {
            (Some("#"), _) => return true,
            (Some("*"), Some(_)) => {}
            (Some(p), Some(t)) if p == t => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

#[derive(Debug, Clone)]
struct Session {
    kind: ClientKind,
    id: String,
    last_issued_ms: u64,
}

#[derive(Debug, Clone, Default)]
struct ArmState {
    online: Option<SessionId>,
    last_pose: Option<CartesianPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmStatus {
    pub arm_id: String,
    pub online: bool,
    pub last_pose: Option<CartesianPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmCheckpoint {
    pub arm_id: String,
    pub last_pose: Option<CartesianPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueCheckpoint {
    pub name: String,
    pub records: Vec<QueueRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingCommand {
    pub command_id: String,
    pub arm_id: String,
}

/// Full durable state, written as the single record of a compacted journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub next_record_id: u64,
    pub arms: Vec<ArmCheckpoint>,
    pub queues: Vec<QueueCheckpoint>,
    pub pending: Vec<PendingCommand>,
    /// Two-node store document.
    pub store: Value,
}

#[derive(Default)]
struct Applied {
    prompt: Option<PatternPrompt>,
    /// Arm whose closed sequences changed and may now promote.
    promote_arm: Option<String>,
}

pub struct Broker {
    config: BrokerConfig,
    clock: Arc<dyn Clock>,
    journal: Journal,
    queues: BTreeMap<String, Queue>,
    arms: BTreeMap<String, ArmState>,
    /// command id -> arm id, for commands queued and not yet acknowledged
    pending: HashMap<String, String>,
    next_record_id: u64,
    sessions: HashMap<SessionId, Session>,
    next_session: SessionId,
    subscriptions: Vec<Subscription>,
    next_subscription: SubscriptionId,
    store: PatternStore,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("queues", &self.queues.keys().collect::<Vec<_>>())
            .field("pending", &self.pending.len())
            .field("sessions", &self.sessions.len())
            .finish()
    }
}

impl Broker {
    pub fn new(config: BrokerConfig, clock: Arc<dyn Clock>, journal: Journal) -> Self {
        let store = PatternStore::new(config.store.clone());
        Self {
            config,
            clock,
            journal,
            queues: BTreeMap::new(),
            arms: BTreeMap::new(),
            pending: HashMap::new(),
            next_record_id: 1,
            sessions: HashMap::new(),
            next_session: 1,
            subscriptions: Vec::new(),
            next_subscription: 1,
            store,
        }
    }

    pub fn in_memory(config: BrokerConfig, clock: Arc<dyn Clock>) -> Self {
        Self::new(config, clock, Journal::memory())
    }

    /// Opens (creating if needed) a journal file and recovers from it.
    pub fn open(
        config: BrokerConfig,
        clock: Arc<dyn Clock>,
        path: impl AsRef<std::path::Path>,
        fsync: bool,
    ) -> Result<Self, BrokerError> {
        let (journal, records) = Journal::open_file(path, fsync)?;
        Self::recover(config, clock, journal, records)
    }

    /// Rebuilds state by replaying `records`, then releases every lease
    /// (their consumers died with the previous process) and runs any
    /// promotion a crash may have cut off.
    pub fn recover(
        config: BrokerConfig,
        clock: Arc<dyn Clock>,
        journal: Journal,
        records: Vec<JournalRecord>,
    ) -> Result<Self, BrokerError> {
        let mut broker = Self::new(config, clock, journal);
        for rec in &records {
            broker.apply(rec, false);
        }
        for queue in broker.queues.values_mut() {
            for r in queue.records.iter_mut() {
                if r.state == RecordState::Leased {
                    r.state = RecordState::Ready;
                    r.lease = None;
                }
            }
        }
        let arms: Vec<String> = broker.arms.keys().cloned().collect();
        for arm in arms {
            broker.promote(&arm)?;
        }
        tracing::info!(records = records.len(), pending = broker.pending.len(), "broker recovered");
        Ok(broker)
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn store(&self) -> &PatternStore {
        &self.store
    }

    pub fn queue(&self, name: &str) -> Option<&Queue> {
        self.queues.get(name)
    }

    pub fn queue_names(&self) -> Vec<String> {
        self.queues.keys().cloned().collect()
    }

    pub fn pending_commands(&self) -> usize {
        self.pending.len()
    }

    pub fn is_pending(&self, command_id: &str) -> bool {
        self.pending.contains_key(command_id)
    }

    pub fn arms(&self) -> Vec<ArmStatus> {
        self.arms
            .iter()
            .map(|(id, a)| ArmStatus {
                arm_id: id.clone(),
                online: a.online.is_some(),
                last_pose: a.last_pose,
            })
            .collect()
    }

    pub fn patterns(&self, arm_id: &str) -> Vec<LearnedPattern> {
        self.store.patterns_for(arm_id).cloned().collect()
    }

    /// Consumer id a robot session leases commands under.
    pub fn consumer_id(&self, session: SessionId) -> Option<String> {
        self.sessions
            .get(&session)
            .map(|s| format!("{}#{session}", s.id))
    }

    // -----------------------------------------------------------------------
    // Sessions

    /// Binds a session. A robot id may have only one live session; its
    /// first registration creates `cmd.<id>` and `ack.<id>`.
    pub fn register(&mut self, kind: ClientKind, id: &str) -> Result<SessionId, BrokerError> {
        if id.is_empty() {
            return Err(BrokerError::Invalid("empty client id".into()));
        }
        if kind == ClientKind::Robot {
            if self.arms.get(id).is_some_and(|a| a.online.is_some()) {
                return Err(BrokerError::Conflict(format!("robot {id} is already connected")));
            }
            if !self.arms.contains_key(id) {
                self.commit(JournalRecord::RegisterArm {
                    arm_id: id.to_string(),
                })?;
            }
        }
        let session = self.next_session;
        self.next_session += 1;
        self.sessions.insert(
            session,
            Session {
                kind,
                id: id.to_string(),
                last_issued_ms: 0,
            },
        );
        if kind == ClientKind::Robot {
            self.arms.entry(id.to_string()).or_default().online = Some(session);
        }
        tracing::debug!(?kind, id, session, "registered");
        Ok(session)
    }

    /// Ends a session. A robot's leases are released immediately; an
    /// operator's open sequences close once its last session is gone.
    pub fn disconnect(&mut self, session: SessionId) -> Result<(), BrokerError> {
        let Some(s) = self.sessions.remove(&session) else {
            return Ok(());
        };
        match s.kind {
            ClientKind::Robot => {
                let consumer = format!("{}#{session}", s.id);
                for queue in self.queues.values_mut() {
                    for r in queue.records.iter_mut() {
                        if r.lease.as_ref().is_some_and(|l| l.consumer_id == consumer) {
                            r.state = RecordState::Ready;
                            r.lease = None;
                        }
                    }
                }
                if let Some(arm) = self.arms.get_mut(&s.id) {
                    if arm.online == Some(session) {
                        arm.online = None;
                    }
                }
            }
            ClientKind::Operator => {
                let still_live = self
                    .sessions
                    .values()
                    .any(|o| o.kind == ClientKind::Operator && o.id == s.id);
                if !still_live {
                    let open: Vec<String> = self
                        .store
                        .open_sessions()
                        .into_iter()
                        .filter(|(_, op)| *op == s.id)
                        .map(|(arm, _)| arm)
                        .collect();
                    for arm in open {
                        self.end_sequence(&arm, &s.id, CloseReason::SessionEnd)?;
                    }
                }
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Queues

    /// Queues an operator command on `cmd.<arm>` and feeds it to the store.
    /// Invalid commands are rejected here: they are recorded in the
    /// operator's sequence and answered with a rejected ack on `ack.<arm>`,
    /// but never queued for the robot.
    pub fn submit_command(
        &mut self,
        cmd: JointCommand,
        session: Option<SessionId>,
    ) -> Result<Submission, BrokerError> {
        let queue = command_queue(&cmd.arm_id);
        if !self.queues.contains_key(&queue) {
            return Err(BrokerError::NotFound(queue));
        }
        if cmd.operator_id.is_empty() {
            return Err(BrokerError::Invalid("empty operator_id".into()));
        }
        if self.store.knows_command(&cmd.id) || self.pending.contains_key(&cmd.id) {
            return Err(BrokerError::Invalid(format!("duplicate command id {}", cmd.id)));
        }
        if let Some(sid) = session {
            let s = self
                .sessions
                .get(&sid)
                .ok_or_else(|| BrokerError::Invalid("unknown session".into()))?;
            if s.kind != ClientKind::Operator || s.id != cmd.operator_id {
                return Err(BrokerError::Invalid(format!(
                    "session is not operator {}",
                    cmd.operator_id
                )));
            }
            if cmd.issued_at_ms < s.last_issued_ms {
                return Err(BrokerError::Invalid(format!(
                    "issued_at_ms {} precedes {}",
                    cmd.issued_at_ms, s.last_issued_ms
                )));
            }
        }
        let now = self.clock.now_ms();
        if self.store.idle_expired(&cmd.arm_id, &cmd.operator_id, now) {
            self.end_sequence(&cmd.arm_id, &cmd.operator_id, CloseReason::IdleGap)?;
        }

        let validation = validate_command(&cmd, &self.config.profile);
        if !validation.is_ok() {
            let ack = Ack::rejected(cmd.id.clone(), validation.summary(), now);
            let arm = cmd.arm_id.clone();
            let ack_record_id = self.alloc_record_id();
            let applied = self.commit(JournalRecord::Reject {
                at_ms: now,
                command: cmd,
                ack_record_id,
                ack: ack.clone(),
            })?;
            self.publish(&format!("arm.{arm}.ack"), &Message::Ack(ack));
            if let Some(arm) = applied.promote_arm {
                self.promote(&arm)?;
            }
            return Err(BrokerError::Rejected(validation.violations));
        }

        if let Some(sid) = session {
            if let Some(s) = self.sessions.get_mut(&sid) {
                s.last_issued_ms = cmd.issued_at_ms;
            }
        }
        let record_id = self.alloc_record_id();
        let command_id = cmd.id.clone();
        let operator = cmd.operator_id.clone();
        let applied = self.commit(JournalRecord::Submit {
            record_id,
            at_ms: now,
            command: cmd,
        })?;
        if let Some(prompt) = &applied.prompt {
            self.publish(
                &format!("operator.{operator}.prompt"),
                &Message::PatternPrompt(prompt.clone()),
            );
        }
        Ok(Submission {
            receipt: self.receipt(&queue, record_id, Some(command_id)),
            prompt: applied.prompt,
        })
    }

    /// Generic enqueue. Commands go through [`Broker::submit_command`].
    pub fn enqueue(&mut self, queue: &str, message: Message) -> Result<Receipt, BrokerError> {
        if let Message::Command(cmd) = message {
            if command_queue(&cmd.arm_id) != queue {
                return Err(BrokerError::Invalid(format!(
                    "command for {} sent to {queue}",
                    cmd.arm_id
                )));
            }
            return self.submit_command(cmd, None).map(|s| s.receipt);
        }
        if !self.queues.contains_key(queue) {
            return Err(BrokerError::NotFound(queue.to_string()));
        }
        let record_id = self.alloc_record_id();
        self.commit(JournalRecord::Enqueue {
            queue: queue.to_string(),
            record_id,
            at_ms: self.clock.now_ms(),
            message,
        })?;
        Ok(self.receipt(queue, record_id, None))
    }

    /// Leases the oldest ready record to `consumer` for `lease_ms`.
    pub fn next(
        &mut self,
        queue: &str,
        consumer: &str,
        lease_ms: u64,
    ) -> Result<Option<Delivery>, BrokerError> {
        if lease_ms == 0 {
            return Err(BrokerError::Invalid("lease_ms must be > 0".into()));
        }
        let now = self.clock.now_ms();
        let q = self
            .queues
            .get_mut(queue)
            .ok_or_else(|| BrokerError::NotFound(queue.to_string()))?;
        q.expire_leases(now);
        let Some(record_id) = q
            .records
            .iter()
            .find(|r| r.state == RecordState::Ready)
            .map(|r| r.record_id)
        else {
            return Ok(None);
        };
        self.commit(JournalRecord::Lease {
            queue: queue.to_string(),
            record_id,
            consumer: consumer.to_string(),
            expiry_ms: now + lease_ms,
        })?;
        let r = self.queues[queue]
            .records
            .iter()
            .find(|r| r.record_id == record_id)
            .expect("just leased");
        Ok(Some(Delivery {
            queue: queue.to_string(),
            record_id,
            message: r.message.clone(),
            delivery_count: r.delivery_count,
        }))
    }

    /// Completes a delivery. Fails if the lease belongs to someone else or
    /// has run out; an expired record goes back to ready for redelivery.
    pub fn ack_record(
        &mut self,
        queue: &str,
        consumer: &str,
        record_id: u64,
    ) -> Result<(), BrokerError> {
        let now = self.clock.now_ms();
        let q = self
            .queues
            .get_mut(queue)
            .ok_or_else(|| BrokerError::NotFound(queue.to_string()))?;
        let lease_error = |reason: &str| BrokerError::Lease {
            queue: queue.to_string(),
            record_id,
            reason: reason.to_string(),
        };
        let Some(r) = q.find_mut(record_id) else {
            return Err(lease_error("record is not active"));
        };
        match (&r.state, &r.lease) {
            (RecordState::Leased, Some(l)) if l.consumer_id != consumer => {
                return Err(lease_error("leased by another consumer"))
            }
            (RecordState::Leased, Some(l)) if l.expiry_ms <= now => {
                r.state = RecordState::Ready;
                r.lease = None;
                return Err(lease_error("lease expired"));
            }
            (RecordState::Leased, Some(_)) => {}
            _ => return Err(lease_error("record is not leased")),
        }
        self.commit(JournalRecord::Ack {
            queue: queue.to_string(),
            record_id,
        })?;
        Ok(())
    }

    /// Routes a robot's completion report: queued on `ack.<arm>`, pushed on
    /// `arm.<arm>.ack`, and recorded as the command's outcome. Acks for
    /// commands that are not pending (duplicates, strays) are dropped.
    pub fn route_ack(&mut self, arm_id: &str, ack: Ack) -> Result<RouteOutcome, BrokerError> {
        match self.pending.get(&ack.command_id) {
            Some(arm) if arm == arm_id => {}
            _ => {
                tracing::debug!(arm_id, command_id = %ack.command_id, "dropping ack for unknown command");
                return Ok(RouteOutcome::Dropped);
            }
        }
        let record_id = self.alloc_record_id();
        let applied = self.commit(JournalRecord::RouteAck {
            arm_id: arm_id.to_string(),
            record_id,
            at_ms: self.clock.now_ms(),
            ack: ack.clone(),
        })?;
        self.publish(&format!("arm.{arm_id}.ack"), &Message::Ack(ack));
        if let Some(arm) = applied.promote_arm {
            self.promote(&arm)?;
        }
        Ok(RouteOutcome::Routed)
    }

    // -----------------------------------------------------------------------
    // Sequences and prompts

    /// Closes the operator's open sequence on `arm_id`, if any.
    pub fn end_sequence(
        &mut self,
        arm_id: &str,
        operator_id: &str,
        reason: CloseReason,
    ) -> Result<Option<CommandSequence>, BrokerError> {
        if self.store.open_sequence(arm_id, operator_id).is_none() {
            return Ok(None);
        }
        let at_ms = self.clock.now_ms();
        self.commit(JournalRecord::Close {
            arm_id: arm_id.to_string(),
            operator_id: operator_id.to_string(),
            reason,
            at_ms,
        })?;
        let closed = self
            .store
            .tree()
            .ongoing
            .iter()
            .rev()
            .find(|s| s.arm_id == arm_id && s.operator_id == operator_id)
            .cloned();
        self.promote(arm_id)?;
        Ok(closed)
    }

    /// Accepting enqueues the prompt's remainder, with fresh ids and
    /// timestamps, on `cmd.<arm>` and counts one more use of the pattern.
    pub fn respond_to_prompt(
        &mut self,
        response: &PatternResponse,
    ) -> Result<Vec<Receipt>, BrokerError> {
        let remainder = self
            .store
            .peek_prompt(&response.operator_id, &response.pattern_id)?
            .to_vec();
        if !response.accepted {
            self.store
                .accept_prompt(&response.operator_id, &response.pattern_id, false)?;
            return Ok(Vec::new());
        }
        let now = self.clock.now_ms();
        let use_count = self
            .store
            .pattern(&response.pattern_id)
            .map(|p| p.use_count)
            .unwrap_or(0);
        let arm_id = self
            .store
            .pattern(&response.pattern_id)
            .map(|p| p.arm_id.clone())
            .unwrap_or_else(|| response.arm_id.clone());
        let mut commands = Vec::with_capacity(remainder.len());
        for (i, target) in remainder.iter().enumerate() {
            let name = format!(
                "{}/{}/{}/{use_count}/{now}/{i}",
                arm_id, response.operator_id, response.pattern_id
            );
            let cmd = JointCommand::new(
                Uuid::new_v5(&MINT_NAMESPACE, name.as_bytes()),
                arm_id.clone(),
                response.operator_id.clone(),
                // quantization can round a boundary value just past its limit
                clamp_to_profile(target, &self.config.profile),
                now,
            );
            commands.push(MintedCommand {
                record_id: self.alloc_record_id(),
                command: cmd,
            });
        }
        let queue = command_queue(&arm_id);
        let ids: Vec<(u64, String)> = commands
            .iter()
            .map(|m| (m.record_id, m.command.id.clone()))
            .collect();
        self.commit(JournalRecord::Accept {
            pattern_id: response.pattern_id.clone(),
            operator_id: response.operator_id.clone(),
            at_ms: now,
            commands,
        })?;
        Ok(ids
            .into_iter()
            .map(|(rid, cid)| self.receipt(&queue, rid, Some(cid)))
            .collect())
    }

    /// Periodic housekeeping: closes idle sequences and expires leases.
    pub fn tick(&mut self) -> Result<(), BrokerError> {
        let now = self.clock.now_ms();
        for (arm, op) in self.store.idle_sessions(now) {
            self.end_sequence(&arm, &op, CloseReason::IdleGap)?;
        }
        for q in self.queues.values_mut() {
            q.expire_leases(now);
        }
        Ok(())
    }

    fn promote(&mut self, arm_id: &str) -> Result<Vec<LearnedPattern>, BrokerError> {
        let promoted = self.store.promotable(arm_id, self.clock.now_ms());
        for p in &promoted {
            self.commit(JournalRecord::Promote { pattern: p.clone() })?;
            tracing::info!(arm_id, pattern_id = %p.pattern_id, use_count = p.use_count, "pattern promoted");
            self.publish(
                &format!("arm.{arm_id}.pattern"),
                &Message::Notification(Notification::new(
                    format!("arm.{arm_id}.pattern"),
                    "promoted",
                    json!({
                        "pattern_id": p.pattern_id,
                        "use_count": p.use_count,
                        "length": p.canonical_commands.len(),
                    }),
                )),
            );
        }
        Ok(promoted)
    }

    // -----------------------------------------------------------------------
    // Push

    pub fn subscribe(
        &mut self,
        client_id: &str,
        topics: Vec<String>,
        sink: Box<dyn PushSink>,
    ) -> SubscriptionId {
        let id = self.next_subscription;
        self.next_subscription += 1;
        self.subscriptions.push(Subscription {
            id,
            client_id: client_id.to_string(),
            topics,
            sink,
        });
        id
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) {
        self.subscriptions.retain(|s| s.id != id);
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscriptions.len()
    }

    /// Pushes `msg` once to every live subscription with a matching topic.
    /// Subscribers whose sink reports them gone are dropped.
    pub fn publish(&mut self, topic: &str, msg: &Message) -> usize {
        let mut delivered = 0;
        self.subscriptions.retain(|s| {
            if !s.topics.iter().any(|p| topic_matches(p, topic)) {
                return true;
            }
            if s.sink.push(msg) {
                delivered += 1;
                true
            } else {
                tracing::debug!(client = %s.client_id, "dropping disconnected subscriber");
                false
            }
        });
        delivered
    }

    // -----------------------------------------------------------------------
    // Journal plumbing

    fn alloc_record_id(&mut self) -> u64 {
        let id = self.next_record_id;
        self.next_record_id += 1;
        id
    }

    fn receipt(&self, queue: &str, record_id: u64, command_id: Option<String>) -> Receipt {
        let position = self
            .queues
            .get(queue)
            .and_then(|q| q.records.iter().position(|r| r.record_id == record_id))
            .map(|p| p as u64 + 1)
            .unwrap_or(0);
        Receipt {
            queue: queue.to_string(),
            record_id,
            position,
            command_id,
        }
    }

    fn commit(&mut self, rec: JournalRecord) -> Result<Applied, BrokerError> {
        self.journal.append(&rec)?;
        let applied = self.apply(&rec, true);
        if self.config.compact_every > 0
            && self.journal.appended_since_compact() >= self.config.compact_every
        {
            self.compact()?;
        }
        Ok(applied)
    }

    /// Rewrites the journal as a single checkpoint of the current state.
    pub fn compact(&mut self) -> Result<(), BrokerError> {
        let state = self.checkpoint();
        self.journal.rewrite(&[JournalRecord::Checkpoint {
            state: Box::new(state),
        }])?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut pending: Vec<PendingCommand> = self
            .pending
            .iter()
            .map(|(c, a)| PendingCommand {
                command_id: c.clone(),
                arm_id: a.clone(),
            })
            .collect();
        pending.sort_by(|a, b| a.command_id.cmp(&b.command_id));
        Checkpoint {
            next_record_id: self.next_record_id,
            arms: self
                .arms
                .iter()
                .map(|(id, a)| ArmCheckpoint {
                    arm_id: id.clone(),
                    last_pose: a.last_pose,
                })
                .collect(),
            queues: self
                .queues
                .values()
                .map(|q| QueueCheckpoint {
                    name: q.name.clone(),
                    records: q.records.iter().cloned().collect(),
                })
                .collect(),
            pending,
            store: serde_json::to_value(self.store.tree()).expect("store tree serializes"),
        }
    }

    fn ensure_arm(&mut self, arm_id: &str) {
        self.arms.entry(arm_id.to_string()).or_default();
        for name in [command_queue(arm_id), ack_queue(arm_id)] {
            self.queues
                .entry(name.clone())
                .or_insert_with(|| Queue::new(name));
        }
    }

    fn push_record(&mut self, queue: &str, record_id: u64, at_ms: u64, message: Message) {
        self.next_record_id = self.next_record_id.max(record_id + 1);
        let q = self
            .queues
            .entry(queue.to_string())
            .or_insert_with(|| Queue::new(queue.to_string()));
        q.records.push_back(QueueRecord {
            record_id,
            message,
            enqueued_at_ms: at_ms,
            delivery_count: 0,
            lease: None,
            state: RecordState::Ready,
        });
    }

    /// The single mutation path, shared by live operation and replay.
    /// `live` is false during replay: no prompts are offered then.
    fn apply(&mut self, rec: &JournalRecord, live: bool) -> Applied {
        let mut applied = Applied::default();
        match rec {
            JournalRecord::RegisterArm { arm_id } => self.ensure_arm(arm_id),
            JournalRecord::Submit {
                record_id,
                at_ms,
                command,
            } => {
                self.ensure_arm(&command.arm_id);
                self.push_record(
                    &command_queue(&command.arm_id),
                    *record_id,
                    *at_ms,
                    Message::Command(command.clone()),
                );
                self.pending
                    .insert(command.id.clone(), command.arm_id.clone());
                applied.prompt = self.store.append(command, *at_ms, live);
            }
            JournalRecord::Reject {
                at_ms,
                command,
                ack_record_id,
                ack,
            } => {
                self.ensure_arm(&command.arm_id);
                self.store.append(command, *at_ms, false);
                self.push_record(
                    &ack_queue(&command.arm_id),
                    *ack_record_id,
                    *at_ms,
                    Message::Ack(ack.clone()),
                );
                applied.promote_arm = self.store.apply_outcome(&ack.command_id, ack.status.into());
            }
            JournalRecord::Enqueue {
                queue,
                record_id,
                at_ms,
                message,
            } => self.push_record(queue, *record_id, *at_ms, message.clone()),
            JournalRecord::Lease {
                queue,
                record_id,
                consumer,
                expiry_ms,
            } => {
                if let Some(r) = self.queues.get_mut(queue).and_then(|q| q.find_mut(*record_id)) {
                    r.state = RecordState::Leased;
                    r.lease = Some(Lease {
                        consumer_id: consumer.clone(),
                        expiry_ms: *expiry_ms,
                    });
                    r.delivery_count += 1;
                }
            }
            JournalRecord::Ack { queue, record_id } => {
                if let Some(q) = self.queues.get_mut(queue) {
                    q.records.retain(|r| r.record_id != *record_id);
                }
            }
            JournalRecord::RouteAck {
                arm_id,
                record_id,
                at_ms,
                ack,
            } => {
                self.ensure_arm(arm_id);
                self.pending.remove(&ack.command_id);
                self.push_record(&ack_queue(arm_id), *record_id, *at_ms, Message::Ack(ack.clone()));
                if ack.status == AckStatus::Ok {
                    if let Some(arm) = self.arms.get_mut(arm_id) {
                        arm.last_pose = ack.final_pose;
                    }
                }
                applied.promote_arm = self.store.apply_outcome(&ack.command_id, ack.status.into());
            }
            JournalRecord::Close {
                arm_id,
                operator_id,
                reason,
                at_ms,
            } => {
                self.store.apply_close(arm_id, operator_id, *reason, *at_ms);
            }
            JournalRecord::Promote { pattern } => self.store.insert_pattern(pattern.clone()),
            JournalRecord::Accept {
                pattern_id,
                operator_id,
                at_ms,
                commands,
            } => {
                self.store.bump_use_count(pattern_id);
                self.store.forget_prompt(operator_id, pattern_id);
                for m in commands {
                    self.ensure_arm(&m.command.arm_id);
                    self.push_record(
                        &command_queue(&m.command.arm_id),
                        m.record_id,
                        *at_ms,
                        Message::Command(m.command.clone()),
                    );
                    self.pending
                        .insert(m.command.id.clone(), m.command.arm_id.clone());
                    self.store.append(&m.command, *at_ms, false);
                }
            }
            JournalRecord::Checkpoint { state } => self.restore_checkpoint(state),
        }
        applied
    }

    fn restore_checkpoint(&mut self, state: &Checkpoint) {
        self.next_record_id = state.next_record_id;
        self.arms = state
            .arms
            .iter()
            .map(|a| {
                (
                    a.arm_id.clone(),
                    ArmState {
                        online: None,
                        last_pose: a.last_pose,
                    },
                )
            })
            .collect();
        self.queues = state
            .queues
            .iter()
            .map(|q| {
                (
                    q.name.clone(),
                    Queue {
                        name: q.name.clone(),
                        records: q.records.iter().cloned().collect(),
                    },
                )
            })
            .collect();
        self.pending = state
            .pending
            .iter()
            .map(|p| (p.command_id.clone(), p.arm_id.clone()))
            .collect();
        let tree = StoreTree::from_value(&state.store).unwrap_or_else(|e| {
            tracing::error!(%e, "checkpoint store is unreadable; starting empty");
            StoreTree::default()
        });
        self.store = PatternStore::from_tree(self.config.store.clone(), tree);
    }

    /// Outcome bookkeeping helper for callers that bypass [`Broker::route_ack`].
    pub fn record_outcome(&mut self, command_id: &str, outcome: Outcome) -> Vec<LearnedPattern> {
        let now = self.clock.now_ms();
        self.store.record_outcome(command_id, outcome, now)
    }
}

fn clamp_to_profile(q: &JointConfig, p: &ArmProfile) -> JointConfig {
    use crate::arm_model::Joint;
    let mut angles = q.angles();
    for (k, joint) in Joint::ALL.iter().enumerate() {
        let spec = p.joints.get(*joint);
        angles[k] = angles[k].clamp(spec.min_deg, spec.max_deg);
    }
    JointConfig::new(angles, q.gripper_mm.clamp(p.gripper.min_mm, p.gripper.max_mm))
}
