//! Scripted sessions against an in-process broker and simulated agents.
//!
//! A scenario is JSON lines. A line with a `v` key is a protocol envelope
//! sent by an operator; a line with a `ctl` key is a control record. Blank
//! lines are skipped. See `docs/scenarios.md` for the record catalogue.
//!
//! With a [`SimClock`] and the same seed, a scenario always produces the
//! same journal, transcript and store snapshot.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use uuid::Uuid;

use crate::arm_model::{ArmProfile, JointConfig};
use crate::broker::{Broker, BrokerConfig, BrokerError, Receipt, SessionId};
use crate::clock::Clock;
use crate::device_agent::{AgentConfig, CommandLink, DeviceAgent, InProcessLink, LinkError};
use crate::journal::{Journal, JournalRecord};
use crate::pattern_store::CloseReason;
use crate::protocol::{
    decode_value, encode_string, AckStatus, ClientKind, Envelope, JointCommand, Message,
    Notification, PatternPrompt, PatternResponse, SeqCounter,
};

/// Namespace for ids of commands created by `send` records.
const SEND_NAMESPACE: Uuid = Uuid::from_u128(0x2d4c_9b8e_13f0_4a55_8c61_77e0_9a3b_c402);

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("step {step}: {reason}")]
    Step { step: usize, reason: String },
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Agent,
    Broker,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "ctl", rename_all = "snake_case", deny_unknown_fields)]
pub enum Control {
    /// Starts a simulated agent for `arm`.
    Agent {
        arm: String,
        #[serde(default)]
        speed_scale: Option<f64>,
    },
    /// Command with an id derived from the seed and the step number.
    Send {
        arm: String,
        operator: String,
        angles: [f64; 5],
        #[serde(default)]
        gripper: f64,
    },
    /// Advances the clock, then runs idle-gap housekeeping.
    Wait { ms: u64 },
    /// Lets every live agent work until its queue is empty.
    Drain,
    /// Explicitly ends the operator's sequence on `arm`.
    End { arm: String, operator: String },
    /// Answers the operator's most recent prompt.
    Respond { operator: String, accept: bool },
    /// Checks what the operator received since its previous `expect`.
    Expect {
        operator: String,
        #[serde(rename = "type")]
        kind: String,
        #[serde(default)]
        count: Option<usize>,
        #[serde(default)]
        status: Option<AckStatus>,
    },
    Kill {
        target: Target,
        #[serde(default)]
        arm: Option<String>,
    },
    Restart {
        target: Target,
        #[serde(default)]
        arm: Option<String>,
    },
    /// Seeded fault injection for one arm's agent. `crash_before_ack` is the
    /// chance the agent dies after moving but before acking;
    /// `stall_before_ack` is the chance it holds the ack until its lease ran out.
    Fault {
        arm: String,
        #[serde(default)]
        crash_before_ack: f64,
        #[serde(default)]
        stall_before_ack: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Envelope(Envelope),
    Control(Control),
}

pub fn parse_scenario(text: &str) -> Result<Vec<Step>, ScenarioError> {
    let mut steps = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |reason: String| ScenarioError::Parse {
            line: i + 1,
            reason,
        };
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if value.get("ctl").is_some() {
            let ctl = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
            steps.push(Step::Control(ctl));
        } else {
            let env = decode_value(&value).map_err(|e| err(e.to_string()))?;
            steps.push(Step::Envelope(env));
        }
    }
    Ok(steps)
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioOptions {
    pub seed: u64,
    pub broker: BrokerConfig,
    pub profile: ArmProfile,
    /// Journal file; an in-memory journal is used when absent.
    pub journal_path: Option<PathBuf>,
}

/// One line of operator-visible output.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptLine {
    pub operator: String,
    /// Exact wire JSON, `\n` terminated.
    pub line: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub transcript: Vec<TranscriptLine>,
    pub failures: Vec<String>,
    pub snapshot: String,
    pub journal: Vec<String>,
    /// Motions performed, per arm.
    pub motions: BTreeMap<String, u64>,
    pub agent_crashes: u64,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

struct OperatorSlot {
    session: SessionId,
    tx: Sender<Message>,
    rx: Receiver<Message>,
    out: SeqCounter,
    subscribed_arms: Vec<String>,
    since_expect: Vec<Message>,
    last_prompt: Option<PatternPrompt>,
}

#[derive(Default)]
struct Faults {
    crash_before_ack: f64,
    stall_before_ack: f64,
}

struct AgentSlot {
    agent: DeviceAgent,
    link: Option<InProcessLink>,
    faults: Faults,
}

pub struct ScenarioRunner {
    opts: ScenarioOptions,
    clock: Arc<dyn Clock>,
    broker: Arc<Mutex<Broker>>,
    operators: BTreeMap<String, OperatorSlot>,
    agents: BTreeMap<String, AgentSlot>,
    rng: ChaCha8Rng,
    transcript: Vec<TranscriptLine>,
    failures: Vec<String>,
    crashes: u64,
    step: usize,
}

impl ScenarioRunner {
    pub fn new(opts: ScenarioOptions, clock: Arc<dyn Clock>) -> Result<Self, ScenarioError> {
        let broker = open_broker(&opts, clock.clone(), Vec::new())?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            opts,
            clock,
            broker: Arc::new(Mutex::new(broker)),
            operators: BTreeMap::new(),
            agents: BTreeMap::new(),
            transcript: Vec::new(),
            failures: Vec::new(),
            crashes: 0,
            step: 0,
        })
    }

    pub fn broker(&self) -> Arc<Mutex<Broker>> {
        self.broker.clone()
    }

    pub fn run(mut self, steps: &[Step]) -> Result<ScenarioReport, ScenarioError> {
        for step in steps {
            self.step += 1;
            self.apply(step)?;
            self.collect();
        }
        self.pump()?;
        self.collect();
        Ok(self.finish())
    }

    fn finish(self) -> ScenarioReport {
        let b = self.broker.lock().expect("broker lock");
        ScenarioReport {
            transcript: self.transcript,
            failures: self.failures,
            snapshot: b.store().snapshot_string(),
            journal: journal_lines(&b),
            motions: self
                .agents
                .iter()
                .map(|(arm, s)| (arm.clone(), s.agent.motions()))
                .collect(),
            agent_crashes: self.crashes,
        }
    }

    fn fail(&self, reason: impl Into<String>) -> ScenarioError {
        ScenarioError::Step {
            step: self.step,
            reason: reason.into(),
        }
    }

    fn apply(&mut self, step: &Step) -> Result<(), ScenarioError> {
        match step {
            Step::Envelope(env) => self.apply_envelope(env.body.clone()),
            Step::Control(ctl) => self.apply_control(ctl.clone()),
        }
    }

    fn apply_envelope(&mut self, body: Message) -> Result<(), ScenarioError> {
        match body {
            Message::Command(cmd) => self.submit(cmd),
            Message::PatternResponse(resp) => self.respond(resp),
            Message::Subscribe(sub) => {
                let op = self.operator(&sub.client_id)?;
                let tx = op.tx.clone();
                self.broker
                    .lock()
                    .expect("broker lock")
                    .subscribe(&sub.client_id, sub.topics, Box::new(tx));
                Ok(())
            }
            Message::Notification(n) if n.event == "sequence_end" => {
                let arm = n.data.get("arm_id").and_then(Value::as_str);
                let op = n.data.get("operator_id").and_then(Value::as_str);
                match (arm, op) {
                    (Some(arm), Some(op)) => {
                        let (arm, op) = (arm.to_string(), op.to_string());
                        self.end(&arm, &op)
                    }
                    _ => Err(self.fail("sequence_end needs data.arm_id and data.operator_id")),
                }
            }
            other => Err(self.fail(format!("operators cannot send `{}`", other.type_name()))),
        }
    }

    fn apply_control(&mut self, ctl: Control) -> Result<(), ScenarioError> {
        match ctl {
            Control::Agent { arm, speed_scale } => {
                if self.agents.contains_key(&arm) {
                    return Err(self.fail(format!("agent {arm} already started")));
                }
                let mut cfg = AgentConfig::new(arm.clone(), self.opts.profile.clone());
                if let Some(s) = speed_scale {
                    cfg.speed_scale = s;
                }
                let agent = DeviceAgent::new(cfg, self.clock.clone())?;
                let link = self.connect_agent(&arm)?;
                self.agents.insert(
                    arm,
                    AgentSlot {
                        agent,
                        link: Some(link),
                        faults: Faults::default(),
                    },
                );
                Ok(())
            }
            Control::Send {
                arm,
                operator,
                angles,
                gripper,
            } => {
                let cmd = JointCommand::new(
                    send_command_id(self.opts.seed, self.step),
                    arm,
                    operator,
                    JointConfig::new(angles, gripper),
                    self.clock.now_ms(),
                );
                self.submit(cmd)
            }
            Control::Wait { ms } => {
                self.pump()?;
                self.clock.sleep_us(ms.saturating_mul(1_000));
                self.broker.lock().expect("broker lock").tick()?;
                Ok(())
            }
            Control::Drain => self.pump(),
            Control::End { arm, operator } => self.end(&arm, &operator),
            Control::Respond { operator, accept } => {
                let op = self.operator(&operator)?;
                let Some(prompt) = op.last_prompt.clone() else {
                    return Err(self.fail(format!("operator {operator} has no prompt to answer")));
                };
                self.respond(PatternResponse {
                    pattern_id: prompt.pattern_id,
                    arm_id: prompt.arm_id,
                    operator_id: operator,
                    accepted: accept,
                })
            }
            Control::Expect {
                operator,
                kind,
                count,
                status,
            } => {
                self.pump()?;
                self.collect();
                let op = self.operator(&operator)?;
                let got = std::mem::take(&mut op.since_expect)
                    .iter()
                    .filter(|m| m.type_name() == kind)
                    .filter(|m| match (status, m) {
                        (Some(s), Message::Ack(a)) => a.status == s,
                        (Some(_), _) => false,
                        (None, _) => true,
                    })
                    .count();
                let ok = match count {
                    Some(n) => got == n,
                    None => got > 0,
                };
                if !ok {
                    let want = count.map_or("at least 1".to_string(), |n| n.to_string());
                    self.failures.push(format!(
                        "step {}: expected {want} `{kind}` for {operator}, got {got}",
                        self.step
                    ));
                }
                Ok(())
            }
            Control::Kill { target, arm } => match target {
                Target::Agent => {
                    let arm = self.agent_arm(arm)?;
                    let slot = self.agents.get_mut(&arm).expect("checked");
                    if let Some(link) = slot.link.take() {
                        link.disconnect();
                    }
                    Ok(())
                }
                Target::Broker => Err(self.fail("use restart for the broker")),
            },
            Control::Restart { target, arm } => match target {
                Target::Agent => {
                    let arm = self.agent_arm(arm)?;
                    if let Some(old) = self.agents.get_mut(&arm).expect("checked").link.take() {
                        old.disconnect();
                    }
                    let link = self.connect_agent(&arm)?;
                    self.agents.get_mut(&arm).expect("checked").link = Some(link);
                    Ok(())
                }
                Target::Broker => self.restart_broker(),
            },
            Control::Fault {
                arm,
                crash_before_ack,
                stall_before_ack,
            } => {
                let slot = self
                    .agents
                    .get_mut(&arm)
                    .ok_or_else(|| ScenarioError::Step {
                        step: self.step,
                        reason: format!("no agent for {arm}"),
                    })?;
                slot.faults = Faults {
                    crash_before_ack,
                    stall_before_ack,
                };
                Ok(())
            }
        }
    }

    fn agent_arm(&self, arm: Option<String>) -> Result<String, ScenarioError> {
        match arm {
            Some(a) if self.agents.contains_key(&a) => Ok(a),
            Some(a) => Err(self.fail(format!("no agent for {a}"))),
            None if self.agents.len() == 1 => Ok(self.agents.keys().next().cloned().expect("one")),
            None => Err(self.fail("`arm` is required when several agents run")),
        }
    }

    fn connect_agent(&self, arm: &str) -> Result<InProcessLink, ScenarioError> {
        InProcessLink::connect(self.broker.clone(), arm).map_err(|e| self.fail(e.to_string()))
    }

    fn operator(&mut self, id: &str) -> Result<&mut OperatorSlot, ScenarioError> {
        if !self.operators.contains_key(id) {
            let (tx, rx) = mpsc::channel();
            let mut b = self.broker.lock().expect("broker lock");
            let session = b.register(ClientKind::Operator, id)?;
            b.subscribe(id, vec![format!("operator.{id}.#")], Box::new(tx.clone()));
            drop(b);
            self.operators.insert(
                id.to_string(),
                OperatorSlot {
                    session,
                    tx,
                    rx,
                    out: SeqCounter::default(),
                    subscribed_arms: Vec::new(),
                    since_expect: Vec::new(),
                    last_prompt: None,
                },
            );
        }
        Ok(self.operators.get_mut(id).expect("inserted"))
    }

    fn watch_arm(&mut self, operator: &str, arm: &str) -> Result<(), ScenarioError> {
        let broker = self.broker.clone();
        let op = self.operator(operator)?;
        if !op.subscribed_arms.iter().any(|a| a == arm) {
            op.subscribed_arms.push(arm.to_string());
            broker.lock().expect("broker lock").subscribe(
                operator,
                vec![format!("arm.{arm}.ack")],
                Box::new(op.tx.clone()),
            );
        }
        Ok(())
    }

    fn reply(&mut self, operator: &str, event: &str, data: Value) {
        if let Some(op) = self.operators.get(operator) {
            let msg = Message::Notification(Notification::new(
                format!("operator.{operator}.receipt"),
                event,
                data,
            ));
            let _ = op.tx.send(msg);
        }
    }

    fn submit(&mut self, cmd: JointCommand) -> Result<(), ScenarioError> {
        let operator = cmd.operator_id.clone();
        let arm = cmd.arm_id.clone();
        self.watch_arm(&operator, &arm)?;
        let session = self.operators[&operator].session;
        let command_id = cmd.id.clone();
        let result = self
            .broker
            .lock()
            .expect("broker lock")
            .submit_command(cmd, Some(session));
        match result {
            Ok(sub) => self.reply(&operator, "receipt", receipt_json(&sub.receipt)),
            Err(BrokerError::Rejected(v)) => self.reply(
                &operator,
                "rejected",
                json!({"command_id": command_id, "violations": v}),
            ),
            Err(e) => self.reply(
                &operator,
                "error",
                json!({"command_id": command_id, "message": e.to_string()}),
            ),
        }
        Ok(())
    }

    fn respond(&mut self, resp: PatternResponse) -> Result<(), ScenarioError> {
        let operator = resp.operator_id.clone();
        self.operator(&operator)?;
        let result = self
            .broker
            .lock()
            .expect("broker lock")
            .respond_to_prompt(&resp);
        match result {
            Ok(receipts) => {
                let data: Vec<Value> = receipts.iter().map(receipt_json).collect();
                self.reply(
                    &operator,
                    if resp.accepted { "accepted" } else { "dismissed" },
                    json!({"pattern_id": resp.pattern_id, "receipts": data}),
                );
            }
            Err(e) => self.reply(
                &operator,
                "error",
                json!({"pattern_id": resp.pattern_id, "message": e.to_string()}),
            ),
        }
        Ok(())
    }

    fn end(&mut self, arm: &str, operator: &str) -> Result<(), ScenarioError> {
        self.pump()?;
        self.broker
            .lock()
            .expect("broker lock")
            .end_sequence(arm, operator, CloseReason::ExplicitEnd)?;
        Ok(())
    }

    /// Moves pushed messages into the transcript.
    fn collect(&mut self) {
        for (id, op) in self.operators.iter_mut() {
            while let Ok(msg) = op.rx.try_recv() {
                let env = op.out.wrap(msg.clone());
                let line = encode_string(&env).expect("broker messages are valid");
                self.transcript.push(TranscriptLine {
                    operator: id.clone(),
                    line,
                });
                if let Message::PatternPrompt(p) = &msg {
                    op.last_prompt = Some(p.clone());
                }
                op.since_expect.push(msg);
            }
        }
    }

    /// Runs every live agent until no command is ready anywhere.
    fn pump(&mut self) -> Result<(), ScenarioError> {
        let lease_ms = self.opts.broker.lease_ms;
        loop {
            let mut progressed = false;
            let arms: Vec<String> = self.agents.keys().cloned().collect();
            for arm in arms {
                loop {
                    let slot = self.agents.get_mut(&arm).expect("listed");
                    let Some(link) = slot.link.as_mut() else {
                        break;
                    };
                    let Some(delivery) = link.next_command().map_err(link_err(self.step))? else {
                        break;
                    };
                    progressed = true;
                    let ex = slot.agent.execute_one(&delivery.command);
                    let roll: f64 = self.rng.random();
                    if roll < slot.faults.crash_before_ack {
                        self.crashes += 1;
                        slot.link.take().expect("present").disconnect();
                        let link = InProcessLink::connect(self.broker.clone(), &arm)
                            .map_err(link_err(self.step))?;
                        self.agents.get_mut(&arm).expect("listed").link = Some(link);
                        continue;
                    }
                    if roll < slot.faults.crash_before_ack + slot.faults.stall_before_ack {
                        self.clock.sleep_us((lease_ms + 1) * 1_000);
                    }
                    let link = slot.link.as_mut().expect("present");
                    link.complete(&delivery, &ex.ack).map_err(link_err(self.step))?;
                }
            }
            self.collect();
            if !progressed {
                return Ok(());
            }
        }
    }

    fn restart_broker(&mut self) -> Result<(), ScenarioError> {
        let lines = journal_lines(&self.broker.lock().expect("broker lock"));
        let records = lines
            .iter()
            .map(|l| serde_json::from_str::<JournalRecord>(l))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| self.fail(format!("journal unreadable: {e}")))?;
        let fresh = open_broker(&self.opts, self.clock.clone(), records)?;
        *self.broker.lock().expect("broker lock") = fresh;
        // every connection died with the old process
        let operators: Vec<String> = self.operators.keys().cloned().collect();
        self.operators.clear();
        for id in operators {
            self.operator(&id)?;
        }
        let arms: Vec<String> = self.agents.keys().cloned().collect();
        for arm in arms {
            let link = self.connect_agent(&arm)?;
            self.agents.get_mut(&arm).expect("listed").link = Some(link);
        }
        Ok(())
    }
}

fn link_err(step: usize) -> impl Fn(LinkError) -> ScenarioError {
    move |e| ScenarioError::Step {
        step,
        reason: e.to_string(),
    }
}

fn open_broker(
    opts: &ScenarioOptions,
    clock: Arc<dyn Clock>,
    records: Vec<JournalRecord>,
) -> Result<Broker, ScenarioError> {
    let mut config = opts.broker.clone();
    config.profile = opts.profile.clone();
    match &opts.journal_path {
        Some(path) => Ok(Broker::open(config, clock, path, false)?),
        None => {
            let lines = records
                .iter()
                .map(JournalRecord::to_line)
                .collect::<Result<Vec<_>, _>>()
                .map_err(BrokerError::from)?;
            Ok(Broker::recover(config, clock, Journal::memory_from(lines), records)?)
        }
    }
}

fn journal_lines(b: &Broker) -> Vec<String> {
    if let Some(lines) = b.journal().memory_lines() {
        return lines.to_vec();
    }
    b.journal()
        .path()
        .and_then(|p| std::fs::read_to_string(p).ok())
        .map(|t| t.split_inclusive('\n').map(str::to_string).collect())
        .unwrap_or_default()
}

/// Id of the command created by the `send` record at 1-based `step`.
pub fn send_command_id(seed: u64, step: usize) -> Uuid {
    Uuid::new_v5(&SEND_NAMESPACE, format!("{seed}/{step}").as_bytes())
}

pub fn receipt_json(r: &Receipt) -> Value {
    serde_json::to_value(r).expect("receipt serializes")
}

/// Parses and runs `text` on `clock`.
pub fn run_scenario(
    text: &str,
    opts: ScenarioOptions,
    clock: Arc<dyn Clock>,
) -> Result<ScenarioReport, ScenarioError> {
    let steps = parse_scenario(text)?;
    ScenarioRunner::new(opts, clock)?.run(&steps)
}
