//! Broker process: TCP stream endpoint, gateway and housekeeping.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use anyhow::Context;
use iort_core::broker::{command_queue, BrokerError, PushSink, SessionId, SubscriptionId};
use iort_core::client::SESSION_TOPIC;
use iort_core::journal::Journal;
use iort_core::pattern_store::CloseReason;
use iort_core::protocol::{
    decode, encode, ClientKind, Message, Notification, Register, SeqCounter, SeqTracker,
};
use iort_core::scenario::receipt_json;
use iort_core::{Broker, Clock, SystemClock};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::{unbounded_channel, UnboundedSender};
use tokio::sync::Notify;

use crate::{gateway, ServeArgs};

const REGISTER_TIMEOUT: Duration = Duration::from_secs(10);
const ROBOT_POLL: Duration = Duration::from_millis(100);
const TICK: Duration = Duration::from_millis(250);

pub struct Shared {
    broker: Mutex<Broker>,
    /// Woken whenever a command may have become ready.
    pub work: Notify,
    pub clock: Arc<dyn Clock>,
}

impl Shared {
    pub fn new(broker: Broker, clock: Arc<dyn Clock>) -> Self {
        Self {
            broker: Mutex::new(broker),
            work: Notify::new(),
            clock,
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Broker> {
        self.broker.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Push subscription feeding a connection's outgoing queue.
pub struct ChannelSink(pub UnboundedSender<Message>);

impl PushSink for ChannelSink {
    fn push(&self, msg: &Message) -> bool {
        self.0.send(msg.clone()).is_ok()
    }
}

pub fn session_event(event: &str, data: Value) -> Message {
    Message::Notification(Notification::new(SESSION_TOPIC, event, data))
}

fn session_error(code: &str, message: impl Into<String>) -> Message {
    session_event("error", json!({"code": code, "message": message.into()}))
}

pub async fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let config = args.broker.config()?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let broker = match &args.journal {
        Some(path) => Broker::open(config, clock.clone(), path, !args.no_fsync)
            .with_context(|| format!("opening journal {}", path.display()))?,
        None => Broker::new(config, clock.clone(), Journal::disabled()),
    };
    let tcp = TcpListener::bind((args.host.as_str(), args.port))
        .await
        .with_context(|| format!("binding {}:{}", args.host, args.port))?;
    let http = TcpListener::bind((args.host.as_str(), args.http_port))
        .await
        .with_context(|| format!("binding {}:{}", args.host, args.http_port))?;
    let shared = Arc::new(Shared::new(broker, clock));

    println!(
        "{}",
        json!({
            "event": "listening",
            "tcp": tcp.local_addr()?.to_string(),
            "http": http.local_addr()?.to_string(),
        })
    );
    tracing::info!(tcp = %tcp.local_addr()?, http = %http.local_addr()?, "broker listening");

    tokio::spawn(ticker(shared.clone()));
    let app = gateway::router(shared.clone());
    let http_task = tokio::spawn(async move { axum::serve(http, app).await });

    let accept = async {
        loop {
            let (stream, peer) = tcp.accept().await?;
            let shared = shared.clone();
            tokio::spawn(async move {
                if let Err(e) = handle_connection(shared, stream).await {
                    tracing::warn!(%peer, error = %e, "connection ended with error");
                }
            });
        }
        #[allow(unreachable_code)]
        Ok::<(), std::io::Error>(())
    };

    tokio::select! {
        r = accept => r.context("accepting connections")?,
        r = http_task => r?.context("serving HTTP")?,
        _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
    }
    Ok(())
}

async fn ticker(shared: Arc<Shared>) {
    let mut interval = tokio::time::interval(TICK);
    loop {
        interval.tick().await;
        if let Err(e) = shared.lock().tick() {
            tracing::error!(error = %e, "housekeeping failed");
        }
        shared.work.notify_waiters();
    }
}

async fn handle_connection(shared: Arc<Shared>, stream: TcpStream) -> anyhow::Result<()> {
    stream.set_nodelay(true)?;
    let (rd, mut wr) = stream.into_split();
    let mut lines = BufReader::new(rd).lines();
    let (tx, mut rx) = unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        let mut out = SeqCounter::default();
        while let Some(msg) = rx.recv().await {
            match encode(&out.wrap(msg)) {
                Ok(bytes) => {
                    if wr.write_all(&bytes).await.is_err() {
                        break;
                    }
                }
                Err(e) => tracing::error!(error = %e, "unencodable outgoing message"),
            }
        }
        let _ = wr.shutdown().await;
    });

    let mut incoming = SeqTracker::default();
    let first = match tokio::time::timeout(REGISTER_TIMEOUT, lines.next_line()).await {
        Ok(Ok(Some(line))) => Some(line),
        Ok(Ok(None)) => None,
        Ok(Err(e)) => return Err(e.into()),
        Err(_) => {
            let _ = tx.send(session_error("timeout", "no register message"));
            None
        }
    };
    let registration = first.map(|line| match decode(line.as_bytes()) {
        Ok(env) => {
            let _ = incoming.check(env.seq);
            match env.body {
                Message::Register(r) => Ok(r),
                other => Err(format!("first message must be register, got {}", other.type_name())),
            }
        }
        Err(e) => Err(e.to_string()),
    });
    let Register { kind, id } = match registration {
        None => {
            drop(tx);
            let _ = writer.await;
            return Ok(());
        }
        Some(Err(reason)) => {
            let _ = tx.send(session_error("protocol", reason));
            drop(tx);
            let _ = writer.await;
            return Ok(());
        }
        Some(Ok(r)) => r,
    };
    let registered = shared.lock().register(kind, &id);
    let session = match registered {
        Ok(s) => s,
        Err(e) => {
            let code = match e {
                BrokerError::Conflict(_) => "conflict",
                _ => "invalid",
            };
            tracing::warn!(client = %id, error = %e, "registration refused");
            let _ = tx.send(session_error(code, e.to_string()));
            drop(tx);
            let _ = writer.await;
            return Ok(());
        }
    };
    tracing::info!(?kind, client = %id, session, "client registered");
    let _ = tx.send(session_event("registered", json!({"session": session})));

    let result = match kind {
        ClientKind::Robot => robot_loop(&shared, session, &id, &mut lines, &mut incoming, &tx).await,
        ClientKind::Operator => {
            let mut ctx = OperatorCtx::new(shared.clone(), session, id.clone(), tx.clone());
            let r = operator_loop(&mut ctx, &mut lines, &mut incoming).await;
            ctx.close();
            r
        }
    };
    if kind == ClientKind::Robot {
        if let Err(e) = shared.lock().disconnect(session) {
            tracing::error!(error = %e, "disconnect failed");
        }
    }
    tracing::info!(?kind, client = %id, session, "client disconnected");
    drop(tx);
    let _ = writer.await;
    result
}

type Lines = tokio::io::Lines<BufReader<tokio::net::tcp::OwnedReadHalf>>;

/// Decodes one incoming line, answering protocol errors on the connection.
fn read_message(
    line: &str,
    incoming: &mut SeqTracker,
    tx: &UnboundedSender<Message>,
) -> Option<Message> {
    if line.trim().is_empty() {
        return None;
    }
    let env = match decode(line.as_bytes()) {
        Ok(env) => env,
        Err(e) => {
            let _ = tx.send(session_error("protocol", e.to_string()));
            return None;
        }
    };
    if let Err(e) = incoming.check(env.seq) {
        let _ = tx.send(session_error("protocol", e.to_string()));
        return None;
    }
    Some(env.body)
}

struct InFlight {
    record_id: u64,
    command_id: String,
    expiry_ms: u64,
}

/// Feeds one command at a time to a robot and completes it on ack.
async fn robot_loop(
    shared: &Shared,
    session: SessionId,
    arm_id: &str,
    lines: &mut Lines,
    incoming: &mut SeqTracker,
    tx: &UnboundedSender<Message>,
) -> anyhow::Result<()> {
    let queue = command_queue(arm_id);
    let (consumer, lease_ms) = {
        let b = shared.lock();
        (
            b.consumer_id(session).context("session vanished")?,
            b.config().lease_ms,
        )
    };
    let mut in_flight: Option<InFlight> = None;
    loop {
        if in_flight
            .as_ref()
            .is_some_and(|f| shared.clock.now_ms() >= f.expiry_ms)
        {
            // lease ran out; the record is ready again and may come straight back
            in_flight = None;
        }
        if in_flight.is_none() {
            let mut b = shared.lock();
            if let Some(d) = b.next(&queue, &consumer, lease_ms)? {
                match d.message {
                    Message::Command(cmd) => {
                        in_flight = Some(InFlight {
                            record_id: d.record_id,
                            command_id: cmd.id.clone(),
                            expiry_ms: shared.clock.now_ms() + lease_ms,
                        });
                        let _ = tx.send(Message::Command(cmd));
                    }
                    other => {
                        tracing::warn!(kind = other.type_name(), "non-command record on command queue");
                        b.ack_record(&queue, &consumer, d.record_id)?;
                        continue;
                    }
                }
            }
        }
        let woken = shared.work.notified();
        tokio::select! {
            line = lines.next_line() => {
                let Some(line) = line? else { return Ok(()) };
                match read_message(&line, incoming, tx) {
                    Some(Message::Ack(ack)) => {
                        let mut b = shared.lock();
                        b.route_ack(arm_id, ack.clone())?;
                        if in_flight.as_ref().is_some_and(|f| f.command_id == ack.command_id) {
                            let f = in_flight.take().expect("checked");
                            if let Err(e) = b.ack_record(&queue, &consumer, f.record_id) {
                                tracing::warn!(error = %e, "late queue ack");
                            }
                        }
                    }
                    Some(other) => {
                        let _ = tx.send(session_error(
                            "invalid",
                            format!("robots cannot send {}", other.type_name()),
                        ));
                    }
                    None => {}
                }
            }
            _ = woken, if in_flight.is_none() => {}
            _ = tokio::time::sleep(ROBOT_POLL) => {}
        }
    }
}

async fn operator_loop(
    ctx: &mut OperatorCtx,
    lines: &mut Lines,
    incoming: &mut SeqTracker,
) -> anyhow::Result<()> {
    while let Some(line) = lines.next_line().await? {
        if let Some(msg) = read_message(&line, incoming, &ctx.tx) {
            ctx.handle(msg);
        }
    }
    Ok(())
}

/// One operator session, shared by the TCP endpoint and the WebSocket gateway.
pub struct OperatorCtx {
    shared: Arc<Shared>,
    session: SessionId,
    operator: String,
    tx: UnboundedSender<Message>,
    subscriptions: Vec<SubscriptionId>,
}

impl OperatorCtx {
    pub fn new(
        shared: Arc<Shared>,
        session: SessionId,
        operator: String,
        tx: UnboundedSender<Message>,
    ) -> Self {
        Self {
            shared,
            session,
            operator,
            tx,
            subscriptions: Vec::new(),
        }
    }

    fn reply(&self, event: &str, data: Value) {
        let topic = format!("operator.{}.receipt", self.operator);
        let _ = self
            .tx
            .send(Message::Notification(Notification::new(topic, event, data)));
    }

    pub fn subscribe(&mut self, topics: Vec<String>) {
        let id = self.shared.lock().subscribe(
            &self.operator,
            topics,
            Box::new(ChannelSink(self.tx.clone())),
        );
        self.subscriptions.push(id);
    }

    pub fn handle(&mut self, msg: Message) {
        match msg {
            Message::Subscribe(s) => {
                let topics = s.topics.clone();
                self.subscribe(s.topics);
                let _ = self.tx.send(session_event("subscribed", json!({"topics": topics})));
            }
            Message::Command(cmd) => {
                let command_id = cmd.id.clone();
                if cmd.operator_id != self.operator {
                    self.reply(
                        "error",
                        json!({"command_id": command_id, "message": format!("session is operator {}", self.operator)}),
                    );
                    return;
                }
                let result = self.shared.lock().submit_command(cmd, Some(self.session));
                match result {
                    Ok(sub) => {
                        self.shared.work.notify_waiters();
                        self.reply("receipt", receipt_json(&sub.receipt));
                    }
                    Err(BrokerError::Rejected(v)) => self.reply(
                        "rejected",
                        json!({"command_id": command_id, "violations": v}),
                    ),
                    Err(e) => self.reply(
                        "error",
                        json!({"command_id": command_id, "message": e.to_string()}),
                    ),
                }
            }
            Message::PatternResponse(mut resp) => {
                resp.operator_id = self.operator.clone();
                let result = self.shared.lock().respond_to_prompt(&resp);
                match result {
                    Ok(receipts) => {
                        self.shared.work.notify_waiters();
                        let data: Vec<Value> = receipts.iter().map(receipt_json).collect();
                        self.reply(
                            if resp.accepted { "accepted" } else { "dismissed" },
                            json!({"pattern_id": resp.pattern_id, "receipts": data}),
                        );
                    }
                    Err(e) => self.reply(
                        "error",
                        json!({"pattern_id": resp.pattern_id, "message": e.to_string()}),
                    ),
                }
            }
            Message::Notification(n) if n.event == "sequence_end" => {
                let Some(arm) = n.data.get("arm_id").and_then(Value::as_str) else {
                    self.reply("error", json!({"message": "sequence_end needs data.arm_id"}));
                    return;
                };
                let result = self
                    .shared
                    .lock()
                    .end_sequence(arm, &self.operator, CloseReason::ExplicitEnd);
                if let Err(e) = result {
                    self.reply("error", json!({"message": e.to_string()}));
                }
            }
            other => self.reply(
                "error",
                json!({"message": format!("operators cannot send {}", other.type_name())}),
            ),
        }
    }

    pub fn close(&mut self) {
        let mut b = self.shared.lock();
        for id in self.subscriptions.drain(..) {
            b.unsubscribe(id);
        }
        if let Err(e) = b.disconnect(self.session) {
            tracing::error!(error = %e, "disconnect failed");
        }
    }
}
