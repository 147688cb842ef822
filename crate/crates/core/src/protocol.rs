//! Versioned JSON wire format shared by operators, the broker and device agents.
//!
//! Every message is one [`Envelope`] encoded as a single-line JSON object
//! terminated by `\n`. Keys appear in a fixed order (`v`, `type`, `seq`,
//! `body`, and per-body orders listed in `docs/protocol.md`), and floating
//! point fields carry at most six fractional digits, so a line that has been
//! through one decode/encode pass is byte-stable from then on.
//!
//! Decoding is strict about the fields it knows and lenient about fields it
//! does not: unknown keys are ignored so newer peers can add data.

use serde::de::Error as _;
use serde::ser::{Error as _, SerializeMap};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;
use uuid::Uuid;

use crate::arm_model::{ArmProfile, CartesianPose, JointConfig, Violation};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed JSON: {0}")]
    Parse(String),
    #[error("unsupported protocol version {0}")]
    Version(String),
    #[error("missing or ill-typed field `{0}`")]
    Schema(String),
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("cannot encode envelope: {0}")]
    Encode(String),
    #[error("sequence number {got} is not greater than {last}")]
    OutOfOrder { last: u64, got: u64 },
}

// ---------------------------------------------------------------------------
// Numbers

/// Rounds to six fractional digits. Values too large to carry fractional
/// microunits are returned unchanged.
pub fn round6(v: f64) -> f64 {
    const LIMIT: f64 = 8_589_934_592.0; // 2^33: ulp exceeds 1e-6 above this
    if !v.is_finite() || v.abs() >= LIMIT {
        return v;
    }
    (v * 1e6).round() / 1e6
}

pub(crate) fn fixed6<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if !v.is_finite() {
        return Err(S::Error::custom(format!("non-finite number {v}")));
    }
    s.serialize_f64(round6(*v))
}

pub(crate) fn fixed6_or_null<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(round6(*v))
    } else {
        s.serialize_none()
    }
}

fn rounded_value<S: Serializer>(v: &Value, s: S) -> Result<S::Ok, S::Error> {
    canonical_value(v).serialize(s)
}

/// Copy of `v` with every float rounded by [`round6`].
pub fn canonical_value(v: &Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|f| serde_json::Number::from_f64(round6(f)))
            .map(Value::Number)
            .unwrap_or(Value::Null),
        Value::Array(items) => Value::Array(items.iter().map(canonical_value).collect()),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| (k.clone(), canonical_value(v)))
                .collect(),
        ),
        other => other.clone(),
    }
}

// ---------------------------------------------------------------------------
// Payloads

/// One operator instruction: five joint targets plus gripper aperture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointCommand {
    /// Canonical lowercase hyphenated UUID.
    pub id: String,
    pub arm_id: String,
    #[serde(flatten)]
    pub target: JointConfig,
    pub issued_at_ms: u64,
    pub operator_id: String,
}

impl JointCommand {
    pub fn new(
        id: Uuid,
        arm_id: impl Into<String>,
        operator_id: impl Into<String>,
        target: JointConfig,
        issued_at_ms: u64,
    ) -> Self {
        Self {
            id: id.hyphenated().to_string(),
            arm_id: arm_id.into(),
            target,
            issued_at_ms,
            operator_id: operator_id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Ok,
    Rejected,
    Fault,
}

impl AckStatus {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(Self::Ok),
            "rejected" => Some(Self::Rejected),
            "fault" => Some(Self::Fault),
            _ => None,
        }
    }
}

/// Completion report for one command. `final_pose` is present iff `status`
/// is `ok`; otherwise `detail` explains why.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ack {
    pub command_id: String,
    pub status: AckStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_pose: Option<CartesianPose>,
    pub detail: String,
    pub completed_at_ms: u64,
}

impl Ack {
    pub fn ok(command_id: impl Into<String>, pose: CartesianPose, completed_at_ms: u64) -> Self {
        Self {
            command_id: command_id.into(),
            status: AckStatus::Ok,
            final_pose: Some(pose),
            detail: String::new(),
            completed_at_ms,
        }
    }

    pub fn rejected(
        command_id: impl Into<String>,
        detail: impl Into<String>,
        completed_at_ms: u64,
    ) -> Self {
        Self {
            command_id: command_id.into(),
            status: AckStatus::Rejected,
            final_pose: None,
            detail: detail.into(),
            completed_at_ms,
        }
    }
}

/// Push event or broker reply. `data` is free-form JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Notification {
    pub topic: String,
    pub event: String,
    #[serde(serialize_with = "rounded_value")]
    pub data: Value,
}

impl Notification {
    pub fn new(topic: impl Into<String>, event: impl Into<String>, data: Value) -> Self {
        Self {
            topic: topic.into(),
            event: event.into(),
            data,
        }
    }
}

/// Offer to finish a learned pattern whose start matches the operator's
/// current sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternPrompt {
    pub pattern_id: String,
    pub arm_id: String,
    pub operator_id: String,
    pub matched_prefix_len: u64,
    pub remainder: Vec<JointConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternResponse {
    pub pattern_id: String,
    pub arm_id: String,
    pub operator_id: String,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subscribe {
    pub client_id: String,
    pub topics: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Operator,
    Robot,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Register {
    pub kind: ClientKind,
    pub id: String,
}

/// Typed envelope body.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum Message {
    Command(JointCommand),
    Ack(Ack),
    Notification(Notification),
    PatternPrompt(PatternPrompt),
    PatternResponse(PatternResponse),
    Subscribe(Subscribe),
    Register(Register),
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Command(_) => "command",
            Message::Ack(_) => "ack",
            Message::Notification(_) => "notification",
            Message::PatternPrompt(_) => "pattern_prompt",
            Message::PatternResponse(_) => "pattern_response",
            Message::Subscribe(_) => "subscribe",
            Message::Register(_) => "register",
        }
    }

    /// Type-level invariants that JSON typing alone does not capture.
    pub fn check(&self) -> Result<(), ProtocolError> {
        let schema = |f: &str| Err(ProtocolError::Schema(f.to_string()));
        match self {
            Message::Command(c) => {
                if !is_canonical_uuid(&c.id) {
                    return schema("id");
                }
                if !c.target.is_finite() {
                    return Err(ProtocolError::Encode("non-finite joint target".into()));
                }
            }
            Message::Ack(a) => match a.status {
                AckStatus::Ok if a.final_pose.is_none() => return schema("final_pose"),
                AckStatus::Rejected | AckStatus::Fault if a.detail.is_empty() => {
                    return schema("detail")
                }
                AckStatus::Rejected | AckStatus::Fault if a.final_pose.is_some() => {
                    return schema("final_pose")
                }
                _ => {}
            },
            Message::PatternPrompt(p) => {
                if p.remainder.is_empty() {
                    return schema("remainder");
                }
                if p.matched_prefix_len == 0 {
                    return schema("matched_prefix_len");
                }
            }
            Message::Register(r) if r.id.is_empty() => return schema("id"),
            _ => {}
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for Message {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        let obj = value
            .as_object()
            .ok_or_else(|| D::Error::custom("message must be an object"))?;
        let ty = obj
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| D::Error::custom("missing message type"))?;
        let body = obj
            .get("body")
            .ok_or_else(|| D::Error::custom("missing message body"))?;
        message_from_parts(ty, body).map_err(D::Error::custom)
    }
}

impl<'de> Deserialize<'de> for JointCommand {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        command_from_value(&value).map_err(D::Error::custom)
    }
}

impl<'de> Deserialize<'de> for Ack {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        ack_from_value(&value).map_err(D::Error::custom)
    }
}

/// Versioned message with its per-connection sequence number.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub v: u64,
    pub seq: u64,
    pub body: Message,
}

impl Envelope {
    pub fn new(seq: u64, body: Message) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            seq,
            body,
        }
    }
}

impl Serialize for Envelope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(4))?;
        map.serialize_entry("v", &self.v)?;
        map.serialize_entry("type", self.body.type_name())?;
        map.serialize_entry("seq", &self.seq)?;
        match &self.body {
            Message::Command(b) => map.serialize_entry("body", b)?,
            Message::Ack(b) => map.serialize_entry("body", b)?,
            Message::Notification(b) => map.serialize_entry("body", b)?,
            Message::PatternPrompt(b) => map.serialize_entry("body", b)?,
            Message::PatternResponse(b) => map.serialize_entry("body", b)?,
            Message::Subscribe(b) => map.serialize_entry("body", b)?,
            Message::Register(b) => map.serialize_entry("body", b)?,
        }
        map.end()
    }
}

// ---------------------------------------------------------------------------
// Encode / decode

/// One JSON line, `\n` terminated.
pub fn encode(env: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    if env.v != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(env.v.to_string()));
    }
    env.body.check()?;
    let mut out = serde_json::to_vec(env).map_err(|e| ProtocolError::Encode(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// [`encode`] as a `String`, still `\n` terminated.
pub fn encode_string(env: &Envelope) -> Result<String, ProtocolError> {
    encode(env).map(|b| String::from_utf8(b).expect("serde_json emits UTF-8"))
}

pub fn decode(line: &[u8]) -> Result<Envelope, ProtocolError> {
    let value: Value =
        serde_json::from_slice(line).map_err(|e| ProtocolError::Parse(e.to_string()))?;
    decode_value(&value)
}

pub fn decode_value(value: &Value) -> Result<Envelope, ProtocolError> {
    let obj = value
        .as_object()
        .ok_or_else(|| ProtocolError::Parse("top level must be a JSON object".into()))?;
    match obj.get("v") {
        Some(Value::Number(n)) if n.as_u64() == Some(PROTOCOL_VERSION) => {}
        Some(other) => return Err(ProtocolError::Version(other.to_string())),
        None => return Err(ProtocolError::Schema("v".into())),
    }
    let fields = Fields::new(obj, "");
    let ty = fields.str("type")?;
    let seq = fields.u64("seq")?;
    let body = fields.get("body")?;
    Ok(Envelope {
        v: PROTOCOL_VERSION,
        seq,
        body: message_from_parts(&ty, body)?,
    })
}

fn message_from_parts(ty: &str, body: &Value) -> Result<Message, ProtocolError> {
    let msg = match ty {
        "command" => Message::Command(command_from_value(body)?),
        "ack" => Message::Ack(ack_from_value(body)?),
        "notification" => {
            let f = Fields::object(body, "body")?;
            Message::Notification(Notification {
                topic: f.str("topic")?,
                event: f.str("event")?,
                data: f.opt("data").cloned().unwrap_or(Value::Null),
            })
        }
        "pattern_prompt" => {
            let f = Fields::object(body, "body")?;
            let remainder = f
                .array("remainder")?
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let path = format!("remainder[{i}]");
                    joint_config_from(&Fields::object(v, &path)?)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Message::PatternPrompt(PatternPrompt {
                pattern_id: f.str("pattern_id")?,
                arm_id: f.str("arm_id")?,
                operator_id: f.str("operator_id")?,
                matched_prefix_len: f.u64("matched_prefix_len")?,
                remainder,
            })
        }
        "pattern_response" => {
            let f = Fields::object(body, "body")?;
            Message::PatternResponse(PatternResponse {
                pattern_id: f.str("pattern_id")?,
                arm_id: f.str("arm_id")?,
                operator_id: f.str("operator_id")?,
                accepted: f.bool("accepted")?,
            })
        }
        "subscribe" => {
            let f = Fields::object(body, "body")?;
            let topics = f
                .array("topics")?
                .iter()
                .map(|t| t.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| ProtocolError::Schema("topics".into()))?;
            Message::Subscribe(Subscribe {
                client_id: f.str("client_id")?,
                topics,
            })
        }
        "register" => {
            let f = Fields::object(body, "body")?;
            let kind = match f.str("kind")?.as_str() {
                "operator" => ClientKind::Operator,
                "robot" => ClientKind::Robot,
                _ => return Err(ProtocolError::Schema("kind".into())),
            };
            Message::Register(Register {
                kind,
                id: f.str("id")?,
            })
        }
        other => return Err(ProtocolError::UnknownType(other.to_string())),
    };
    msg.check()?;
    Ok(msg)
}

pub(crate) fn command_from_value(value: &Value) -> Result<JointCommand, ProtocolError> {
    let f = Fields::object(value, "body")?;
    let id = f.str("id")?;
    if !is_canonical_uuid(&id) {
        return Err(ProtocolError::Schema("id".into()));
    }
    Ok(JointCommand {
        id,
        arm_id: f.str("arm_id")?,
        target: joint_config_from(&f)?,
        issued_at_ms: f.u64("issued_at_ms")?,
        operator_id: f.str("operator_id")?,
    })
}

fn ack_from_value(value: &Value) -> Result<Ack, ProtocolError> {
    let f = Fields::object(value, "body")?;
    let status = AckStatus::parse(&f.str("status")?)
        .ok_or_else(|| ProtocolError::Schema("status".into()))?;
    let final_pose = match f.opt("final_pose") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let p = Fields::object(v, "final_pose")?;
            Some(CartesianPose {
                x_cm: p.f64("x_cm")?,
                y_cm: p.f64("y_cm")?,
                z_cm: p.f64("z_cm")?,
                roll_deg: p.f64("roll_deg")?,
                gripper_mm: p.f64("gripper_mm")?,
            })
        }
    };
    let ack = Ack {
        command_id: f.str("command_id")?,
        status,
        final_pose,
        detail: match f.opt("detail") {
            None => String::new(),
            Some(_) => f.str("detail")?,
        },
        completed_at_ms: f.u64("completed_at_ms")?,
    };
    Message::Ack(ack.clone()).check()?;
    Ok(ack)
}

fn joint_config_from(f: &Fields<'_>) -> Result<JointConfig, ProtocolError> {
    Ok(JointConfig {
        base_deg: f.f64("base_deg")?,
        shoulder_deg: f.f64("shoulder_deg")?,
        elbow_deg: f.f64("elbow_deg")?,
        wrist_pitch_deg: f.f64("wrist_pitch_deg")?,
        wrist_roll_deg: f.f64("wrist_roll_deg")?,
        gripper_mm: f.f64("gripper_mm")?,
    })
}

pub fn is_canonical_uuid(s: &str) -> bool {
    Uuid::parse_str(s)
        .map(|u| u.hyphenated().to_string() == s)
        .unwrap_or(false)
}

/// Typed access to an object's fields; failures name the field.
struct Fields<'a> {
    map: &'a Map<String, Value>,
    prefix: String,
}

impl<'a> Fields<'a> {
    fn new(map: &'a Map<String, Value>, prefix: &str) -> Self {
        Self {
            map,
            prefix: prefix.to_string(),
        }
    }

    fn object(value: &'a Value, path: &str) -> Result<Self, ProtocolError> {
        let map = value
            .as_object()
            .ok_or_else(|| ProtocolError::Schema(path.to_string()))?;
        // Body fields are reported bare; nested objects keep their path.
        let prefix = if path == "body" { "" } else { path };
        Ok(Self::new(map, prefix))
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn schema(&self, name: &str) -> ProtocolError {
        ProtocolError::Schema(self.path(name))
    }

    fn opt(&self, name: &str) -> Option<&'a Value> {
        self.map.get(name)
    }

    fn get(&self, name: &str) -> Result<&'a Value, ProtocolError> {
        self.map.get(name).ok_or_else(|| self.schema(name))
    }

    fn str(&self, name: &str) -> Result<String, ProtocolError> {
        self.get(name)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.schema(name))
    }

    fn f64(&self, name: &str) -> Result<f64, ProtocolError> {
        self.get(name)?.as_f64().ok_or_else(|| self.schema(name))
    }

    fn u64(&self, name: &str) -> Result<u64, ProtocolError> {
        self.get(name)?.as_u64().ok_or_else(|| self.schema(name))
    }

    fn bool(&self, name: &str) -> Result<bool, ProtocolError> {
        self.get(name)?.as_bool().ok_or_else(|| self.schema(name))
    }

    fn array(&self, name: &str) -> Result<&'a Vec<Value>, ProtocolError> {
        self.get(name)?.as_array().ok_or_else(|| self.schema(name))
    }
}

// ---------------------------------------------------------------------------
// Validation and sequencing

/// Outcome of checking a command against an arm's limits. Every violated
/// field is listed, not just the first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("; ")
    }
}

pub fn validate_command(cmd: &JointCommand, profile: &ArmProfile) -> ValidationResult {
    ValidationResult {
        violations: profile.violations(&cmd.target),
    }
}

/// Enforces strictly increasing `seq` on one connection.
#[derive(Debug, Default, Clone)]
pub struct SeqTracker {
    last: Option<u64>,
}

impl SeqTracker {
    pub fn check(&mut self, seq: u64) -> Result<(), ProtocolError> {
        if let Some(last) = self.last {
            if seq <= last {
                return Err(ProtocolError::OutOfOrder { last, got: seq });
            }
        }
        self.last = Some(seq);
        Ok(())
    }
}

/// Outgoing side of a connection: stamps consecutive sequence numbers.
#[derive(Debug, Default, Clone)]
pub struct SeqCounter {
    next: u64,
}

impl SeqCounter {
    pub fn wrap(&mut self, body: Message) -> Envelope {
        self.next += 1;
        Envelope::new(self.next, body)
    }
}
