use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use iort_core::client::{Connection, Received, SESSION_TOPIC};
use iort_core::protocol::{
    encode_string, AckStatus, ClientKind, Envelope, JointCommand, Message, Notification,
    PatternPrompt, PatternResponse, Subscribe,
};
use iort_core::scenario::{
    parse_scenario, run_scenario, send_command_id, Control, ScenarioOptions, Step,
};
use iort_core::{Clock, JointConfig, SimClock, SystemClock};
use serde_json::{json, Value};
use uuid::Uuid;

use crate::{ScriptArgs, SendArgs, WatchArgs};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

fn print_envelope(env: &Envelope) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(encode_string(env)?.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn connect(addr: &str, operator: &str) -> anyhow::Result<Connection> {
    let mut conn = Connection::connect(addr, CONNECT_TIMEOUT)
        .with_context(|| format!("connecting to {addr}"))?;
    conn.register(ClientKind::Operator, operator, CONNECT_TIMEOUT)
        .context("registering with the broker")?;
    Ok(conn)
}

fn subscribe(conn: &mut Connection, client: &str, topics: Vec<String>) -> anyhow::Result<()> {
    conn.send(Message::Subscribe(Subscribe {
        client_id: client.to_string(),
        topics,
    }))?;
    Ok(())
}

fn is_session(msg: &Message) -> bool {
    matches!(msg, Message::Notification(n) if n.topic == SESSION_TOPIC)
}

pub fn send(args: SendArgs) -> anyhow::Result<ExitCode> {
    let mut conn = connect(&args.broker, &args.operator)?;
    subscribe(&mut conn, &args.operator, vec![format!("arm.{}.ack", args.arm)])?;
    let cmd = JointCommand::new(
        Uuid::new_v4(),
        args.arm.clone(),
        args.operator.clone(),
        JointConfig::new(args.angles.0, args.gripper),
        SystemClock.now_ms(),
    );
    let command_id = cmd.id.clone();
    conn.send(Message::Command(cmd))?;

    let deadline = Instant::now() + Duration::from_millis(args.timeout_ms);
    let receipt_topic = format!("operator.{}.receipt", args.operator);
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            bail!("no ack for {command_id} within {} ms", args.timeout_ms);
        }
        let Received::Envelope(env) = conn.recv(Some(left))? else {
            continue;
        };
        match &env.body {
            Message::Ack(a) if a.command_id == command_id => {
                print_envelope(&env)?;
                conn.shutdown();
                return Ok(if a.status == AckStatus::Ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                });
            }
            Message::Notification(n) if n.topic == receipt_topic && n.event == "error" => {
                print_envelope(&env)?;
                conn.shutdown();
                return Ok(ExitCode::FAILURE);
            }
            Message::Notification(n) if n.topic == SESSION_TOPIC && n.event == "error" => {
                bail!("broker error: {}", n.data);
            }
            _ => {}
        }
    }
}

pub fn watch(args: WatchArgs) -> anyhow::Result<ExitCode> {
    let topics: Vec<String> = args
        .topics
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    if topics.is_empty() {
        bail!("--topics is empty");
    }
    let mut conn = connect(&args.broker, &args.client)?;
    subscribe(&mut conn, &args.client, topics)?;
    let deadline = args
        .timeout_ms
        .map(|ms| Instant::now() + Duration::from_millis(ms));
    let mut seen = 0usize;
    loop {
        if args.count.is_some_and(|c| seen >= c) {
            break;
        }
        let wait = match deadline {
            Some(d) => {
                let left = d.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    break;
                }
                Some(left)
            }
            None => None,
        };
        match conn.recv(wait)? {
            Received::Idle => continue,
            Received::Envelope(env) if is_session(&env.body) => continue,
            Received::Envelope(env) => {
                print_envelope(&env)?;
                seen += 1;
            }
        }
    }
    conn.shutdown();
    Ok(ExitCode::SUCCESS)
}

pub fn script(args: ScriptArgs) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(&args.file)
        .with_context(|| format!("reading {}", args.file.display()))?;
    match args.broker.clone() {
        Some(addr) => {
            let steps = parse_scenario(&text)?;
            RemoteScript::new(addr, args.seed, Duration::from_millis(args.timeout_ms)).run(&steps)
        }
        None => script_local(&args, &text),
    }
}

fn script_local(args: &ScriptArgs, text: &str) -> anyhow::Result<ExitCode> {
    let config = args.broker_opts.config()?;
    let opts = ScenarioOptions {
        seed: args.seed,
        profile: config.profile.clone(),
        broker: config,
        journal_path: args.journal.clone(),
    };
    let clock: Arc<dyn Clock> = if args.sim_clock {
        Arc::new(SimClock::new())
    } else {
        Arc::new(SystemClock)
    };
    let report = run_scenario(text, opts, clock)?;
    {
        let mut out = std::io::stdout().lock();
        for line in &report.transcript {
            out.write_all(line.line.as_bytes())?;
        }
        out.flush()?;
    }
    if let Some(path) = &args.snapshot {
        std::fs::write(path, &report.snapshot)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    for f in &report.failures {
        eprintln!("FAIL {f}");
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

struct RemoteOperator {
    conn: Connection,
    arms: HashSet<String>,
    /// Commands sent or minted whose ack has not arrived.
    awaiting: HashSet<String>,
    acked: HashSet<String>,
    /// Requests whose receipt reply has not arrived.
    replies_due: usize,
    since_expect: Vec<Message>,
    last_prompt: Option<PatternPrompt>,
}

/// Runs scenario records against a live broker, one connection per operator.
struct RemoteScript {
    addr: String,
    seed: u64,
    timeout: Duration,
    operators: BTreeMap<String, RemoteOperator>,
    failures: Vec<String>,
    step: usize,
}

impl RemoteScript {
    fn new(addr: String, seed: u64, timeout: Duration) -> Self {
        Self {
            addr,
            seed,
            timeout,
            operators: BTreeMap::new(),
            failures: Vec::new(),
            step: 0,
        }
    }

    fn run(mut self, steps: &[Step]) -> anyhow::Result<ExitCode> {
        for step in steps {
            self.step += 1;
            self.apply(step)
                .with_context(|| format!("step {}", self.step))?;
        }
        self.drain()?;
        for op in self.operators.values() {
            op.conn.shutdown();
        }
        for f in &self.failures {
            eprintln!("FAIL {f}");
        }
        Ok(if self.failures.is_empty() {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        })
    }

    fn operator(&mut self, id: &str) -> anyhow::Result<&mut RemoteOperator> {
        if !self.operators.contains_key(id) {
            let mut conn = connect(&self.addr, id)?;
            subscribe(&mut conn, id, vec![format!("operator.{id}.#")])?;
            self.operators.insert(
                id.to_string(),
                RemoteOperator {
                    conn,
                    arms: HashSet::new(),
                    awaiting: HashSet::new(),
                    acked: HashSet::new(),
                    replies_due: 0,
                    since_expect: Vec::new(),
                    last_prompt: None,
                },
            );
        }
        Ok(self.operators.get_mut(id).expect("inserted"))
    }

    fn submit(&mut self, cmd: JointCommand) -> anyhow::Result<()> {
        let op = self.operator(&cmd.operator_id)?;
        if op.arms.insert(cmd.arm_id.clone()) {
            let client = cmd.operator_id.clone();
            subscribe(&mut op.conn, &client, vec![format!("arm.{}.ack", cmd.arm_id)])?;
        }
        op.awaiting.insert(cmd.id.clone());
        op.replies_due += 1;
        op.conn.send(Message::Command(cmd))?;
        Ok(())
    }

    fn respond(&mut self, resp: PatternResponse) -> anyhow::Result<()> {
        let op = self.operator(&resp.operator_id)?;
        op.replies_due += 1;
        op.conn.send(Message::PatternResponse(resp))?;
        Ok(())
    }

    fn end(&mut self, arm: &str, operator: &str) -> anyhow::Result<()> {
        self.drain()?;
        let op = self.operator(operator)?;
        op.conn.send(Message::Notification(Notification::new(
            format!("operator.{operator}.control"),
            "sequence_end",
            json!({"arm_id": arm, "operator_id": operator}),
        )))?;
        Ok(())
    }

    fn apply(&mut self, step: &Step) -> anyhow::Result<()> {
        match step {
            Step::Envelope(env) => match env.body.clone() {
                Message::Command(cmd) => self.submit(cmd),
                Message::PatternResponse(resp) => self.respond(resp),
                Message::Subscribe(sub) => {
                    let op = self.operator(&sub.client_id)?;
                    op.conn.send(Message::Subscribe(sub))?;
                    Ok(())
                }
                Message::Notification(n) if n.event == "sequence_end" => {
                    let field = |k: &str| n.data.get(k).and_then(Value::as_str).map(str::to_string);
                    match (field("arm_id"), field("operator_id")) {
                        (Some(arm), Some(op)) => self.end(&arm, &op),
                        _ => bail!("sequence_end needs data.arm_id and data.operator_id"),
                    }
                }
                other => bail!("operators cannot send `{}`", other.type_name()),
            },
            Step::Control(ctl) => self.apply_control(ctl),
        }
    }

    fn apply_control(&mut self, ctl: &Control) -> anyhow::Result<()> {
        match ctl {
            Control::Send {
                arm,
                operator,
                angles,
                gripper,
            } => {
                let cmd = JointCommand::new(
                    send_command_id(self.seed, self.step),
                    arm.clone(),
                    operator.clone(),
                    JointConfig::new(*angles, *gripper),
                    SystemClock.now_ms(),
                );
                self.submit(cmd)
            }
            Control::Wait { ms } => {
                self.drain()?;
                let end = Instant::now() + Duration::from_millis(*ms);
                while Instant::now() < end {
                    self.poll(Duration::from_millis(10))?;
                }
                Ok(())
            }
            Control::Drain => self.drain(),
            Control::End { arm, operator } => self.end(arm, operator),
            Control::Respond { operator, accept } => {
                self.drain()?;
                let op = self.operator(operator)?;
                let prompt = op
                    .last_prompt
                    .clone()
                    .ok_or_else(|| anyhow!("operator {operator} has no prompt to answer"))?;
                self.respond(PatternResponse {
                    pattern_id: prompt.pattern_id,
                    arm_id: prompt.arm_id,
                    operator_id: operator.clone(),
                    accepted: *accept,
                })
            }
            Control::Expect {
                operator,
                kind,
                count,
                status,
            } => {
                self.drain()?;
                let step = self.step;
                let op = self.operator(operator)?;
                let got = std::mem::take(&mut op.since_expect)
                    .iter()
                    .filter(|m| m.type_name() == kind)
                    .filter(|m| match (status, m) {
                        (Some(s), Message::Ack(a)) => a.status == *s,
                        (Some(_), _) => false,
                        (None, _) => true,
                    })
                    .count();
                let ok = match count {
                    Some(n) => got == *n,
                    None => got > 0,
                };
                if !ok {
                    let want = count.map_or("at least 1".to_string(), |n| n.to_string());
                    self.failures.push(format!(
                        "step {step}: expected {want} `{kind}` for {operator}, got {got}"
                    ));
                }
                Ok(())
            }
            Control::Agent { .. } | Control::Kill { .. } | Control::Restart { .. } | Control::Fault { .. } => {
                bail!("agent and broker control records need the embedded broker; drop --broker")
            }
        }
    }

    fn outstanding(&self) -> usize {
        self.operators
            .values()
            .map(|o| o.awaiting.len() + o.replies_due)
            .sum()
    }

    /// Waits until every request is answered and every command acked.
    fn drain(&mut self) -> anyhow::Result<()> {
        let end = Instant::now() + self.timeout;
        while self.outstanding() > 0 {
            if Instant::now() >= end {
                bail!("timed out waiting for {} outstanding replies and acks", self.outstanding());
            }
            self.poll(Duration::from_millis(10))?;
        }
        Ok(())
    }

    /// Reads whatever each connection has, printing it as it arrives.
    fn poll(&mut self, wait: Duration) -> anyhow::Result<()> {
        for (id, op) in self.operators.iter_mut() {
            loop {
                let env = match op.conn.recv(Some(wait))? {
                    Received::Idle => break,
                    Received::Envelope(env) => env,
                };
                if is_session(&env.body) {
                    if let Message::Notification(n) = &env.body {
                        if n.event == "error" {
                            bail!("broker error for {id}: {}", n.data);
                        }
                    }
                    continue;
                }
                print_envelope(&env)?;
                match &env.body {
                    Message::Ack(a) => {
                        op.awaiting.remove(&a.command_id);
                        op.acked.insert(a.command_id.clone());
                    }
                    Message::PatternPrompt(p) => op.last_prompt = Some(p.clone()),
                    Message::Notification(n) if n.topic == format!("operator.{id}.receipt") => {
                        op.replies_due = op.replies_due.saturating_sub(1);
                        match n.event.as_str() {
                            "accepted" => {
                                for r in n.data["receipts"].as_array().into_iter().flatten() {
                                    let c = r.get("command_id").and_then(Value::as_str);
                                    if let Some(c) = c.filter(|c| !op.acked.contains(*c)) {
                                        op.awaiting.insert(c.to_string());
                                    }
                                }
                            }
                            "error" => {
                                if let Some(c) = n.data.get("command_id").and_then(Value::as_str) {
                                    op.awaiting.remove(c);
                                }
                            }
                            _ => {}
                        }
                    }
                    _ => {}
                }
                op.since_expect.push(env.body);
            }
        }
        Ok(())
    }
}
