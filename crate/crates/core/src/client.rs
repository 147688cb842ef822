//! Blocking client for the broker's line-JSON stream endpoint.
//!
//! Session replies from the broker are `notification` envelopes on topic
//! `session`: `registered` (data `{"session": n}`) or `error`
//! (data `{"code": ..., "message": ...}`). Operator command replies arrive on
//! `operator.<id>.receipt` with event `receipt`, `rejected` or `error`.

use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

use crate::device_agent::{CommandLink, LinkDelivery, LinkError};
use crate::protocol::{
    decode, encode, Ack, ClientKind, Envelope, Message, ProtocolError, Register, SeqCounter,
    SeqTracker,
};

pub const SESSION_TOPIC: &str = "session";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("connection closed by peer")]
    Closed,
    #[error("broker refused session ({code}): {message}")]
    Refused { code: String, message: String },
    #[error("timed out waiting for the broker")]
    Timeout,
}

impl From<ClientError> for LinkError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Io(e) => LinkError::Io(e),
            ClientError::Closed => LinkError::Closed,
            ClientError::Refused { code, message } if code == "conflict" => {
                LinkError::Conflict(message)
            }
            other => LinkError::Protocol(other.to_string()),
        }
    }
}

#[derive(Debug)]
pub enum Received {
    Envelope(Envelope),
    /// Nothing arrived within the timeout.
    Idle,
}

#[derive(Debug)]
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    partial: Vec<u8>,
    out: SeqCounter,
    incoming: SeqTracker,
    session: Option<u64>,
}

impl Connection {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, ClientError> {
        let mut last = io::Error::new(ErrorKind::NotFound, "address resolved to nothing");
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => return Self::from_stream(stream),
                Err(e) => last = e,
            }
        }
        Err(last.into())
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self, ClientError> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
            partial: Vec::new(),
            out: SeqCounter::default(),
            incoming: SeqTracker::default(),
            session: None,
        })
    }

    pub fn session(&self) -> Option<u64> {
        self.session
    }

    pub fn send(&mut self, body: Message) -> Result<Envelope, ClientError> {
        let env = self.out.wrap(body);
        self.writer.write_all(&encode(&env)?)?;
        self.writer.flush()?;
        Ok(env)
    }

    /// Waits up to `timeout` for the next envelope; `None` blocks.
    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<Received, ClientError> {
        self.reader.get_ref().set_read_timeout(timeout)?;
        loop {
            match self.reader.read_until(b'\n', &mut self.partial) {
                Ok(0) => return Err(ClientError::Closed),
                Ok(_) if self.partial.ends_with(b"\n") => {
                    let line = std::mem::take(&mut self.partial);
                    if line.iter().all(|b| b.is_ascii_whitespace()) {
                        continue;
                    }
                    let env = decode(&line)?;
                    self.incoming.check(env.seq)?;
                    return Ok(Received::Envelope(env));
                }
                Ok(_) => return Err(ClientError::Closed),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Ok(Received::Idle)
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Like [`Connection::recv`] but a timeout is an error.
    pub fn expect(&mut self, timeout: Duration) -> Result<Envelope, ClientError> {
        match self.recv(Some(timeout))? {
            Received::Envelope(env) => Ok(env),
            Received::Idle => Err(ClientError::Timeout),
        }
    }

    /// Sends `register` and waits for the broker's verdict.
    pub fn register(
        &mut self,
        kind: ClientKind,
        id: &str,
        timeout: Duration,
    ) -> Result<u64, ClientError> {
        self.send(Message::Register(Register {
            kind,
            id: id.to_string(),
        }))?;
        loop {
            let env = self.expect(timeout)?;
            let Message::Notification(n) = &env.body else {
                continue;
            };
            if n.topic != SESSION_TOPIC {
                continue;
            }
            return match n.event.as_str() {
                "registered" => {
                    let session = n.data.get("session").and_then(Value::as_u64).unwrap_or(0);
                    self.session = Some(session);
                    Ok(session)
                }
                _ => Err(ClientError::Refused {
                    code: str_field(&n.data, "code"),
                    message: str_field(&n.data, "message"),
                }),
            };
        }
    }

    pub fn shutdown(&self) {
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
    }
}

fn str_field(v: &Value, key: &str) -> String {
    v.get(key)
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string()
}

/// Robot side of a broker connection. The broker pushes one command at a
/// time and completes the queue record when the ack arrives.
#[derive(Debug)]
pub struct TcpLink {
    conn: Connection,
    poll: Duration,
}

impl TcpLink {
    pub fn connect(
        addr: impl ToSocketAddrs,
        arm_id: &str,
        timeout: Duration,
    ) -> Result<Self, ClientError> {
        let mut conn = Connection::connect(addr, timeout)?;
        conn.register(ClientKind::Robot, arm_id, timeout)?;
        Ok(Self {
            conn,
            poll: Duration::from_millis(200),
        })
    }

    pub fn with_poll(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }
}

impl CommandLink for TcpLink {
    fn next_command(&mut self) -> Result<Option<LinkDelivery>, LinkError> {
        match self.conn.recv(Some(self.poll))? {
            Received::Idle => Ok(None),
            Received::Envelope(env) => match env.body {
                Message::Command(command) => Ok(Some(LinkDelivery {
                    record_id: None,
                    delivery_count: 0,
                    command,
                })),
                Message::Notification(n) if n.topic == SESSION_TOPIC && n.event == "error" => {
                    Err(LinkError::Protocol(str_field(&n.data, "message")))
                }
                _ => Ok(None),
            },
        }
    }

    fn complete(&mut self, _delivery: &LinkDelivery, ack: &Ack) -> Result<(), LinkError> {
        self.conn.send(Message::Ack(ack.clone()))?;
        Ok(())
    }
}
