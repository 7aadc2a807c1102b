//! Wire format shared by gateway, master, worker and cloud nodes.
//!
//! A frame is a 4-byte big-endian body length followed by a compact JSON
//! object `{auth_tag, msg_id, msg_type, payload, sender_id, version}`.
//! Keys are emitted in sorted order, so every message has exactly one
//! encoding; decode re-encodes and rejects anything else. The tag is
//! HMAC-SHA256 over the same object with the `auth_tag` key left out.

use std::fmt;
use std::io::{self, Read, Write};

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::Sha256;
use thiserror::Error;

use crate::models::{Algorithm, Hyperparams, ModelDocument, Prediction};
use crate::pipeline::ModelBundle;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;
/// Hex characters in an HMAC-SHA256 tag.
pub const AUTH_TAG_LEN: usize = 64;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame body of {0} bytes exceeds the 64 MiB limit")]
    PayloadTooLarge(usize),
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    TruncatedFrame { needed: usize, have: usize },
    #[error("bad frame length {0}")]
    BadLength(u32),
    #[error("malformed body: {0}")]
    MalformedBody(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("authentication tag does not verify")]
    BadAuthTag,
    #[error("protocol version {got}, expected {expected}")]
    VersionMismatch { got: u64, expected: u32 },
    #[error("{0} bytes after the frame")]
    TrailingBytes(usize),
    #[error("connection closed")]
    Closed,
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    RegisterWorker,
    LoadQuery,
    LoadReport,
    JobRequest,
    PlacementResponse,
    TaskDispatch,
    TaskResult,
    Heartbeat,
    Error,
}

impl MsgType {
    pub const ALL: [MsgType; 9] = [
        MsgType::RegisterWorker,
        MsgType::LoadQuery,
        MsgType::LoadReport,
        MsgType::JobRequest,
        MsgType::PlacementResponse,
        MsgType::TaskDispatch,
        MsgType::TaskResult,
        MsgType::Heartbeat,
        MsgType::Error,
    ];

    pub fn token(self) -> &'static str {
        match self {
            MsgType::RegisterWorker => "register_worker",
            MsgType::LoadQuery => "load_query",
            MsgType::LoadReport => "load_report",
            MsgType::JobRequest => "job_request",
            MsgType::PlacementResponse => "placement_response",
            MsgType::TaskDispatch => "task_dispatch",
            MsgType::TaskResult => "task_result",
            MsgType::Heartbeat => "heartbeat",
            MsgType::Error => "error",
        }
    }

    pub fn from_token(token: &str) -> Option<MsgType> {
        MsgType::ALL.into_iter().find(|t| t.token() == token)
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterWorker {
    pub worker_id: String,
    /// Address the worker accepts dispatches and load queries on.
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Empty {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadReport {
    pub cpu_load: f64,
    pub mem_load: f64,
    pub queue_length: u64,
    /// Monotonic milliseconds on the reporting node.
    pub taken_at: u64,
}

impl LoadReport {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cpu_load) && (0.0..=1.0).contains(&self.mem_load)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub job_id: u64,
    pub rows: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementDecision {
    Worker,
    BrokerSelf,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementResponse {
    pub job_id: u64,
    pub decision: PlacementDecision,
    pub target_id: String,
    pub target_address: String,
    pub via_cloud: bool,
    pub arbitration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelRef {
    /// A bundle file the executing node resolves from its model directory.
    Named { name: String },
    Inline { bundle: Box<ModelBundle> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    /// Raw 8- or 9-column CSV; the bundle's scaler and mask are applied.
    Predict { model: ModelRef, csv: String },
    /// Already scaled rows in labelled-matrix CSV form.
    Train {
        algorithm: Algorithm,
        hyperparams: Hyperparams,
        seed: u64,
        train_csv: String,
        calibration_csv: String,
    },
}

impl Task {
    /// Data rows carried by the task.
    pub fn row_count(&self) -> usize {
        let csv = match self {
            Task::Predict { csv, .. } => csv,
            Task::Train { train_csv, .. } => train_csv,
        };
        csv.lines().skip(1).filter(|l| !l.trim().is_empty()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDispatch {
    pub job_id: u64,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskOutput {
    Predictions { rows: Vec<Prediction> },
    Model { model: ModelDocument },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskResult {
    pub job_id: u64,
    pub worker_id: String,
    pub execution_ms: f64,
    pub output: TaskOutput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub job_id: Option<u64>,
    pub code: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    RegisterWorker(RegisterWorker),
    LoadQuery,
    LoadReport(LoadReport),
    JobRequest(JobRequest),
    PlacementResponse(PlacementResponse),
    TaskDispatch(TaskDispatch),
    TaskResult(TaskResult),
    Heartbeat,
    Error(ErrorBody),
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::RegisterWorker(_) => MsgType::RegisterWorker,
            Payload::LoadQuery => MsgType::LoadQuery,
            Payload::LoadReport(_) => MsgType::LoadReport,
            Payload::JobRequest(_) => MsgType::JobRequest,
            Payload::PlacementResponse(_) => MsgType::PlacementResponse,
            Payload::TaskDispatch(_) => MsgType::TaskDispatch,
            Payload::TaskResult(_) => MsgType::TaskResult,
            Payload::Heartbeat => MsgType::Heartbeat,
            Payload::Error(_) => MsgType::Error,
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            Payload::RegisterWorker(p) => serde_json::to_value(p),
            Payload::LoadQuery | Payload::Heartbeat => serde_json::to_value(Empty {}),
            Payload::LoadReport(p) => serde_json::to_value(p),
            Payload::JobRequest(p) => serde_json::to_value(p),
            Payload::PlacementResponse(p) => serde_json::to_value(p),
            Payload::TaskDispatch(p) => serde_json::to_value(p),
            Payload::TaskResult(p) => serde_json::to_value(p),
            Payload::Error(p) => serde_json::to_value(p),
        };
        v.expect("payload types serialize infallibly")
    }

    fn from_value(t: MsgType, v: Value) -> std::result::Result<Payload, serde_json::Error> {
        Ok(match t {
            MsgType::RegisterWorker => Payload::RegisterWorker(serde_json::from_value(v)?),
            MsgType::LoadQuery => {
                serde_json::from_value::<Empty>(v)?;
                Payload::LoadQuery
            }
            MsgType::LoadReport => Payload::LoadReport(serde_json::from_value(v)?),
            MsgType::JobRequest => Payload::JobRequest(serde_json::from_value(v)?),
            MsgType::PlacementResponse => Payload::PlacementResponse(serde_json::from_value(v)?),
            MsgType::TaskDispatch => Payload::TaskDispatch(serde_json::from_value(v)?),
            MsgType::TaskResult => Payload::TaskResult(serde_json::from_value(v)?),
            MsgType::Heartbeat => {
                serde_json::from_value::<Empty>(v)?;
                Payload::Heartbeat
            }
            MsgType::Error => Payload::Error(serde_json::from_value(v)?),
        })
    }

    /// Per-type constraints that JSON alone cannot express.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let finite_ms = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be finite and >= 0, got {v}"))
            }
        };
        match self {
            Payload::LoadReport(r) if !r.is_valid() => Err(format!("load fractions out of range: {r:?}")),
            Payload::PlacementResponse(p) => {
                if p.decision == PlacementDecision::Cloud && !p.via_cloud {
                    return Err("cloud placement must set via_cloud".into());
                }
                finite_ms("arbitration_ms", p.arbitration_ms)
            }
            Payload::TaskResult(r) => {
                finite_ms("execution_ms", r.execution_ms)?;
                if let TaskOutput::Predictions { rows } = &r.output {
                    if let Some(bad) = rows.iter().find(|p| !p.is_valid()) {
                        return Err(format!("invalid prediction {bad:?}"));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub version: u32,
    pub msg_id: u64,
    pub sender_id: String,
    /// Lower-case hex HMAC; filled in by [`Codec::seal`] and on decode.
    pub auth_tag: String,
    pub payload: Payload,
}

impl Message {
    pub fn new(msg_id: u64, sender_id: impl Into<String>, payload: Payload) -> Self {
        Message { version: PROTOCOL_VERSION, msg_id, sender_id: sender_id.into(), auth_tag: String::new(), payload }
    }

    pub fn msg_type(&self) -> MsgType {
        self.payload.msg_type()
    }
}

#[derive(Serialize)]
struct UnsignedFrame<'a> {
    msg_id: u64,
    msg_type: &'static str,
    payload: &'a Value,
    sender_id: &'a str,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireFrame {
    auth_tag: String,
    msg_id: u64,
    msg_type: String,
    payload: Value,
    sender_id: String,
    version: u64,
}

/// Encoder/decoder bound to one shared secret.
#[derive(Clone)]
pub struct Codec {
    secret: Vec<u8>,
}

impl fmt::Debug for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Codec").finish_non_exhaustive()
    }
}

impl Codec {
    pub fn new(secret: impl AsRef<[u8]>) -> Self {
        Codec { secret: secret.as_ref().to_vec() }
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.secret).expect("HMAC accepts keys of any length")
    }

    fn unsigned_bytes(msg: &Message, payload: &Value) -> Vec<u8> {
        let frame = UnsignedFrame {
            msg_id: msg.msg_id,
            msg_type: msg.msg_type().token(),
            payload,
            sender_id: &msg.sender_id,
            version: msg.version,
        };
        serde_json::to_vec(&frame).expect("frame serializes")
    }

    fn tag(&self, unsigned: &[u8]) -> String {
        let mut mac = self.mac();
        mac.update(unsigned);
        hex::encode(mac.finalize().into_bytes())
    }

    /// Returns `msg` with its authentication tag computed.
    pub fn seal(&self, mut msg: Message) -> Message {
        let payload = msg.payload.to_value();
        msg.auth_tag = self.tag(&Codec::unsigned_bytes(&msg, &payload));
        msg
    }

    fn body(&self, msg: &Message) -> Result<Vec<u8>> {
        msg.payload.validate().map_err(ProtocolError::InvalidPayload)?;
        let payload = msg.payload.to_value();
        let auth_tag = self.tag(&Codec::unsigned_bytes(msg, &payload));
        let frame = WireFrame {
            auth_tag,
            msg_id: msg.msg_id,
            msg_type: msg.msg_type().token().to_string(),
            payload,
            sender_id: msg.sender_id.clone(),
            version: u64::from(msg.version),
        };
        let body = serde_json::to_vec(&frame).map_err(|e| ProtocolError::InvalidPayload(e.to_string()))?;
        if body.len() > MAX_FRAME_BYTES {
            return Err(ProtocolError::PayloadTooLarge(body.len()));
        }
        Ok(body)
    }

    /// Length prefix plus body. The tag is always recomputed; any tag
    /// already on `msg` is ignored.
    pub fn encode(&self, msg: &Message) -> Result<Vec<u8>> {
        let body = self.body(msg)?;
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(&self, bytes: &[u8]) -> Result<Message> {
        let (msg, used) = self.decode_frame(bytes)?;
        if used != bytes.len() {
            return Err(ProtocolError::TrailingBytes(bytes.len() - used));
        }
        Ok(msg)
    }

    /// Decodes the frame at the start of `bytes`, returning the message and
    /// the number of bytes it occupied.
    pub fn decode_frame(&self, bytes: &[u8]) -> Result<(Message, usize)> {
        if bytes.len() < 4 {
            return Err(ProtocolError::TruncatedFrame { needed: 4, have: bytes.len() });
        }
        let n = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        check_length(n)?;
        let end = 4 + n as usize;
        if bytes.len() < end {
            return Err(ProtocolError::TruncatedFrame { needed: end, have: bytes.len() });
        }
        Ok((self.decode_body(&bytes[4..end])?, end))
    }

    /// Splits a buffer of back-to-back frames.
    pub fn decode_all(&self, mut bytes: &[u8]) -> Result<Vec<Message>> {
        let mut out = Vec::new();
        while !bytes.is_empty() {
            let (msg, used) = self.decode_frame(bytes)?;
            out.push(msg);
            bytes = &bytes[used..];
        }
        Ok(out)
    }

    pub fn decode_body(&self, body: &[u8]) -> Result<Message> {
        let text = std::str::from_utf8(body).map_err(|e| ProtocolError::MalformedBody(e.to_string()))?;
        let frame: WireFrame =
            serde_json::from_str(text).map_err(|e| ProtocolError::MalformedBody(e.to_string()))?;
        if frame.version != u64::from(PROTOCOL_VERSION) {
            return Err(ProtocolError::VersionMismatch { got: frame.version, expected: PROTOCOL_VERSION });
        }
        let msg_type = MsgType::from_token(&frame.msg_type).ok_or(ProtocolError::UnknownType(frame.msg_type))?;
        let payload =
            Payload::from_value(msg_type, frame.payload).map_err(|e| ProtocolError::MalformedBody(e.to_string()))?;
        let mut msg = Message {
            version: PROTOCOL_VERSION,
            msg_id: frame.msg_id,
            sender_id: frame.sender_id,
            auth_tag: String::new(),
            payload,
        };
        let canonical_payload = msg.payload.to_value();
        let unsigned = Codec::unsigned_bytes(&msg, &canonical_payload);
        let tag = hex::decode(&frame.auth_tag).map_err(|_| ProtocolError::BadAuthTag)?;
        let mut mac = self.mac();
        mac.update(&unsigned);
        mac.verify_slice(&tag).map_err(|_| ProtocolError::BadAuthTag)?;
        msg.auth_tag = frame.auth_tag;
        msg.payload.validate().map_err(ProtocolError::MalformedBody)?;
        // a tag can verify for a body that is not byte-canonical (for example
        // reordered keys or upper-case hex); only the canonical form is accepted
        if self.body(&msg)? != body {
            return Err(ProtocolError::MalformedBody("non-canonical encoding".into()));
        }
        Ok(msg)
    }
}

fn check_length(n: u32) -> Result<()> {
    if n == 0 || n as usize > MAX_FRAME_BYTES {
        return Err(ProtocolError::BadLength(n));
    }
    Ok(())
}

/// Writes one frame, returning the number of bytes put on the wire.
pub fn write_message<W: Write>(w: &mut W, codec: &Codec, msg: &Message) -> Result<usize> {
    let frame = codec.encode(msg)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len())
}

/// Reads one frame, returning the message and the bytes consumed.
/// A clean end of stream before any header byte is [`ProtocolError::Closed`].
pub fn read_message<R: Read>(r: &mut R, codec: &Codec) -> Result<(Message, usize)> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(ProtocolError::Closed),
            Ok(0) => return Err(ProtocolError::TruncatedFrame { needed: 4, have: got }),
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let n = u32::from_be_bytes(header);
    check_length(n)?;
    let mut body = vec![0u8; n as usize];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::TruncatedFrame { needed: 4 + n as usize, have: 4 },
        _ => ProtocolError::Io(e),
    })?;
    Ok((codec.decode_body(&body)?, 4 + n as usize))
}

/// Space-separated hex of `bytes`, 32 per line.
pub fn hex_dump(bytes: &[u8]) -> String {
    bytes
        .chunks(32)
        .map(|c| c.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}
