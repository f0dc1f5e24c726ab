//! Binary message format between a controller and a simulator.
//!
//! Every frame is a 4-byte little-endian payload length followed by the
//! payload. The payload starts with one kind byte; the remaining fields are
//! laid out in a fixed order per kind with no field tags. Strings are a u32
//! length plus UTF-8 bytes, booleans and enums one byte, floats binary64 LE.
//! `PROTOCOL.md` at the repository root carries the full layout and test
//! vectors.

use std::fmt;

use crate::distribution::{DistTag, Distribution};
use crate::value::{TensorValue, Value};

pub const PROTOCOL_VERSION: u8 = 1;
pub const FRAME_HEADER_LEN: usize = 4;
/// Upper bound on a single payload, guarding against corrupt length prefixes.
pub const MAX_PAYLOAD_LEN: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Handshake = 1,
    HandshakeResult = 2,
    Run = 3,
    RunResult = 4,
    SampleRequest = 5,
    SampleReply = 6,
    ObserveNotify = 7,
    ObserveAck = 8,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => MessageKind::Handshake,
            2 => MessageKind::HandshakeResult,
            3 => MessageKind::Run,
            4 => MessageKind::RunResult,
            5 => MessageKind::SampleRequest,
            6 => MessageKind::SampleReply,
            7 => MessageKind::ObserveNotify,
            8 => MessageKind::ObserveAck,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WireMessage {
    Handshake {
        version: u8,
        system_name: String,
    },
    HandshakeResult {
        version: u8,
        model_name: String,
    },
    Run {
        observation: Option<Value>,
    },
    RunResult {
        result: Value,
    },
    SampleRequest {
        address: String,
        name: String,
        distribution: Distribution,
        control: bool,
        replace: bool,
    },
    SampleReply {
        value: Value,
    },
    ObserveNotify {
        address: String,
        distribution: Distribution,
        observed_value: Value,
    },
    ObserveAck,
}

impl WireMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            WireMessage::Handshake { .. } => MessageKind::Handshake,
            WireMessage::HandshakeResult { .. } => MessageKind::HandshakeResult,
            WireMessage::Run { .. } => MessageKind::Run,
            WireMessage::RunResult { .. } => MessageKind::RunResult,
            WireMessage::SampleRequest { .. } => MessageKind::SampleRequest,
            WireMessage::SampleReply { .. } => MessageKind::SampleReply,
            WireMessage::ObserveNotify { .. } => MessageKind::ObserveNotify,
            WireMessage::ObserveAck => MessageKind::ObserveAck,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("cannot encode message: invalid field `{field}`")]
pub struct EncodeError {
    pub field: &'static str,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    /// At least this many further bytes are required before the frame is complete.
    #[error("need {0} more bytes")]
    NeedMoreBytes(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
}

fn protocol(msg: impl Into<String>) -> DecodeError {
    DecodeError::Protocol(msg.into())
}

#[repr(u8)]
enum ValueTag {
    F64 = 1,
    I64 = 2,
    Bool = 3,
    Str = 4,
    Tensor = 5,
}

/// Byte sink for the fixed-order layouts shared by frames and trace records.
#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn bool(&mut self, v: bool) {
        self.buf.push(u8::from(v));
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn str(&mut self, s: &str) -> Result<(), EncodeError> {
        let n = u32::try_from(s.len()).map_err(|_| EncodeError { field: "string" })?;
        self.u32(n);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    pub fn value(&mut self, v: &Value) -> Result<(), EncodeError> {
        match v {
            Value::F64(x) => {
                self.u8(ValueTag::F64 as u8);
                self.f64(*x);
            }
            Value::I64(k) => {
                self.u8(ValueTag::I64 as u8);
                self.i64(*k);
            }
            Value::Bool(b) => {
                self.u8(ValueTag::Bool as u8);
                self.bool(*b);
            }
            Value::Str(s) => {
                self.u8(ValueTag::Str as u8);
                self.str(s)?;
            }
            Value::Tensor(t) => {
                if !t.is_valid() {
                    return Err(EncodeError { field: "tensor" });
                }
                self.u8(ValueTag::Tensor as u8);
                self.u32(t.shape.len() as u32);
                for &d in &t.shape {
                    self.u32(d);
                }
                for &x in &t.data {
                    self.f64(x);
                }
            }
        }
        Ok(())
    }

    pub fn distribution(&mut self, d: &Distribution) -> Result<(), EncodeError> {
        d.validate().map_err(|e| EncodeError { field: e.field })?;
        let p = d.params();
        self.u8(d.tag() as u8);
        self.u32(p.len() as u32);
        for x in p {
            self.f64(x);
        }
        Ok(())
    }
}

/// Bounds-checked reader over one payload.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(protocol("truncated payload"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(protocol(format!("invalid boolean byte {b:#04x}"))),
        }
    }
    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn str(&mut self) -> Result<String, DecodeError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| protocol("string is not UTF-8"))
    }

    pub fn value(&mut self) -> Result<Value, DecodeError> {
        let tag = self.u8()?;
        Ok(match tag {
            t if t == ValueTag::F64 as u8 => Value::F64(self.f64()?),
            t if t == ValueTag::I64 as u8 => Value::I64(self.i64()?),
            t if t == ValueTag::Bool as u8 => Value::Bool(self.bool()?),
            t if t == ValueTag::Str as u8 => Value::Str(self.str()?),
            t if t == ValueTag::Tensor as u8 => {
                let ndim = self.u32()? as usize;
                if ndim > self.remaining() / 4 {
                    return Err(protocol("tensor rank exceeds payload"));
                }
                let shape = (0..ndim)
                    .map(|_| self.u32())
                    .collect::<Result<Vec<_>, _>>()?;
                let n = shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                    .ok_or_else(|| protocol("tensor size overflow"))?;
                if n > self.remaining() / 8 {
                    return Err(protocol("tensor data exceeds payload"));
                }
                let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
                Value::Tensor(TensorValue { shape, data })
            }
            t => return Err(protocol(format!("unknown value tag {t:#04x}"))),
        })
    }

    pub fn distribution(&mut self) -> Result<Distribution, DecodeError> {
        let tag_byte = self.u8()?;
        let tag = DistTag::from_byte(tag_byte)
            .ok_or_else(|| protocol(format!("unknown distribution tag {tag_byte:#04x}")))?;
        let n = self.u32()? as usize;
        if n > self.remaining() / 8 {
            return Err(protocol("distribution parameters exceed payload"));
        }
        let p = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        let d = Distribution::from_params(tag, &p)
            .ok_or_else(|| protocol(format!("{} takes a different parameter count", tag.name())))?;
        d.validate()
            .map_err(|e| protocol(format!("invalid {} parameter {}", tag.name(), e.field)))?;
        Ok(d)
    }
}

/// Encodes one message as a complete frame (length prefix included).
pub fn encode(m: &WireMessage) -> Result<Vec<u8>, EncodeError> {
    let mut w = Writer::default();
    w.u32(0);
    w.u8(m.kind() as u8);
    match m {
        WireMessage::Handshake {
            version,
            system_name,
        } => {
            w.u8(*version);
            w.str(system_name)?;
        }
        WireMessage::HandshakeResult {
            version,
            model_name,
        } => {
            w.u8(*version);
            w.str(model_name)?;
        }
        WireMessage::Run { observation } => match observation {
            Some(v) => {
                w.bool(true);
                w.value(v)?;
            }
            None => w.bool(false),
        },
        WireMessage::RunResult { result } => w.value(result)?,
        WireMessage::SampleRequest {
            address,
            name,
            distribution,
            control,
            replace,
        } => {
            if address.is_empty() {
                return Err(EncodeError { field: "address" });
            }
            w.str(address)?;
            w.str(name)?;
            w.distribution(distribution)?;
            w.bool(*control);
            w.bool(*replace);
        }
        WireMessage::SampleReply { value } => w.value(value)?,
        WireMessage::ObserveNotify {
            address,
            distribution,
            observed_value,
        } => {
            if address.is_empty() {
                return Err(EncodeError { field: "address" });
            }
            w.str(address)?;
            w.distribution(distribution)?;
            w.value(observed_value)?;
        }
        WireMessage::ObserveAck => {}
    }
    let payload_len = w.buf.len() - FRAME_HEADER_LEN;
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(EncodeError { field: "payload" });
    }
    w.buf[..4].copy_from_slice(&(payload_len as u32).to_le_bytes());
    Ok(w.buf)
}

/// Decodes the first frame in `bytes`, returning the message and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(WireMessage, usize), DecodeError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(DecodeError::NeedMoreBytes(FRAME_HEADER_LEN - bytes.len()));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD_LEN {
        return Err(protocol(format!("frame length {len} exceeds limit")));
    }
    let total = FRAME_HEADER_LEN + len;
    if bytes.len() < total {
        return Err(DecodeError::NeedMoreBytes(total - bytes.len()));
    }
    let msg = decode_payload(&bytes[FRAME_HEADER_LEN..total])?;
    Ok((msg, total))
}

pub fn decode_payload(payload: &[u8]) -> Result<WireMessage, DecodeError> {
    let mut r = Reader::new(payload);
    let kind_byte = r.u8().map_err(|_| protocol("empty payload"))?;
    let kind = MessageKind::from_byte(kind_byte)
        .ok_or_else(|| protocol(format!("unknown message kind {kind_byte:#04x}")))?;
    let msg = match kind {
        MessageKind::Handshake => WireMessage::Handshake {
            version: r.u8()?,
            system_name: r.str()?,
        },
        MessageKind::HandshakeResult => WireMessage::HandshakeResult {
            version: r.u8()?,
            model_name: r.str()?,
        },
        MessageKind::Run => {
            let observation = if r.bool()? { Some(r.value()?) } else { None };
            WireMessage::Run { observation }
        }
        MessageKind::RunResult => WireMessage::RunResult { result: r.value()? },
        MessageKind::SampleRequest => {
            let address = r.str()?;
            if address.is_empty() {
                return Err(protocol("empty address"));
            }
            WireMessage::SampleRequest {
                address,
                name: r.str()?,
                distribution: r.distribution()?,
                control: r.bool()?,
                replace: r.bool()?,
            }
        }
        MessageKind::SampleReply => WireMessage::SampleReply { value: r.value()? },
        MessageKind::ObserveNotify => {
            let address = r.str()?;
            if address.is_empty() {
                return Err(protocol("empty address"));
            }
            WireMessage::ObserveNotify {
                address,
                distribution: r.distribution()?,
                observed_value: r.value()?,
            }
        }
        MessageKind::ObserveAck => WireMessage::ObserveAck,
    };
    if r.remaining() != 0 {
        return Err(protocol(format!(
            "{} trailing bytes after {:?}",
            r.remaining(),
            kind
        )));
    }
    Ok(msg)
}

/// Splits a byte stream into frames.
#[derive(Default, Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` when more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<WireMessage>, DecodeError> {
        match decode(&self.buf) {
            Ok((m, used)) => {
                self.buf.drain(..used);
                Ok(Some(m))
            }
            Err(DecodeError::NeedMoreBytes(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Position in the session protocol. Both peers track the same machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionState {
    AwaitingHandshake,
    AwaitingHandshakeResult,
    AwaitingRun,
    InRun,
    AwaitingSampleReply,
    AwaitingObserveAck,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct SessionError {
    pub state: SessionState,
    pub got: MessageKind,
    pub expected: Vec<MessageKind>,
}

impl fmt::Display for SessionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "out-of-order {:?} in state {:?}; expected one of {:?}",
            self.got, self.state, self.expected
        )
    }
}

impl SessionState {
    pub fn expected(self) -> Vec<MessageKind> {
        use MessageKind::*;
        match self {
            SessionState::AwaitingHandshake => vec![Handshake],
            SessionState::AwaitingHandshakeResult => vec![HandshakeResult],
            SessionState::AwaitingRun => vec![Run],
            SessionState::InRun => vec![SampleRequest, ObserveNotify, RunResult],
            SessionState::AwaitingSampleReply => vec![SampleReply],
            SessionState::AwaitingObserveAck => vec![ObserveAck],
        }
    }
}

pub fn session_step(s: SessionState, m: &WireMessage) -> Result<SessionState, SessionError> {
    use MessageKind as K;
    use SessionState as S;
    let next = match (s, m.kind()) {
        (S::AwaitingHandshake, K::Handshake) => S::AwaitingHandshakeResult,
        (S::AwaitingHandshakeResult, K::HandshakeResult) => S::AwaitingRun,
        (S::AwaitingRun, K::Run) => S::InRun,
        (S::InRun, K::SampleRequest) => S::AwaitingSampleReply,
        (S::InRun, K::ObserveNotify) => S::AwaitingObserveAck,
        (S::InRun, K::RunResult) => S::AwaitingRun,
        (S::AwaitingSampleReply, K::SampleReply) => S::InRun,
        (S::AwaitingObserveAck, K::ObserveAck) => S::InRun,
        (state, got) => {
            return Err(SessionError {
                state,
                got,
                expected: state.expected(),
            })
        }
    };
    Ok(next)
}

/// Replays a whole transcript; it must end between runs.
pub fn validate_transcript<'a>(
    msgs: impl IntoIterator<Item = &'a WireMessage>,
) -> Result<SessionState, SessionError> {
    let mut s = SessionState::AwaitingHandshake;
    let mut last = None;
    for m in msgs {
        s = session_step(s, m)?;
        last = Some(m.kind());
    }
    match (s, last) {
        (SessionState::AwaitingRun, _) | (SessionState::AwaitingHandshake, None) => Ok(s),
        (state, got) => Err(SessionError {
            state,
            got: got.unwrap_or(MessageKind::Handshake),
            expected: state.expected(),
        }),
    }
}

/// Canonical messages whose encodings are listed in `PROTOCOL.md`. Together
/// they cover every message kind, value tag and distribution tag.
pub fn conformance_vectors() -> Vec<(&'static str, WireMessage)> {
    let normal = Distribution::Normal {
        mean: 0.0,
        std: 1.0,
    };
    vec![
        (
            "handshake",
            WireMessage::Handshake {
                version: PROTOCOL_VERSION,
                system_name: "ctl".into(),
            },
        ),
        (
            "handshake_result",
            WireMessage::HandshakeResult {
                version: PROTOCOL_VERSION,
                model_name: "toy".into(),
            },
        ),
        ("run_prior", WireMessage::Run { observation: None }),
        (
            "run_observed",
            WireMessage::Run {
                observation: Some(Value::F64(1.0)),
            },
        ),
        (
            "run_result_i64",
            WireMessage::RunResult {
                result: Value::I64(-2),
            },
        ),
        (
            "run_result_bool",
            WireMessage::RunResult {
                result: Value::Bool(true),
            },
        ),
        (
            "run_result_str",
            WireMessage::RunResult {
                result: Value::Str("ok".into()),
            },
        ),
        (
            "sample_request_normal",
            WireMessage::SampleRequest {
                address: "f/Normal".into(),
                name: "x".into(),
                distribution: normal,
                control: true,
                replace: false,
            },
        ),
        (
            "sample_request_uniform",
            WireMessage::SampleRequest {
                address: "f/Uniform".into(),
                name: String::new(),
                distribution: Distribution::Uniform {
                    low: -1.0,
                    high: 2.0,
                },
                control: false,
                replace: true,
            },
        ),
        (
            "sample_request_truncated_normal",
            WireMessage::SampleRequest {
                address: "g/TruncatedNormal".into(),
                name: String::new(),
                distribution: Distribution::TruncatedNormal {
                    mean: 0.5,
                    std: 2.0,
                    low: 0.0,
                    high: 4.0,
                },
                control: true,
                replace: false,
            },
        ),
        (
            "sample_request_categorical",
            WireMessage::SampleRequest {
                address: "c/Categorical".into(),
                name: "k".into(),
                distribution: Distribution::Categorical {
                    probs: vec![0.25, 0.75],
                },
                control: true,
                replace: false,
            },
        ),
        (
            "sample_request_poisson",
            WireMessage::SampleRequest {
                address: "p/Poisson".into(),
                name: String::new(),
                distribution: Distribution::Poisson { rate: 3.0 },
                control: false,
                replace: false,
            },
        ),
        (
            "sample_reply_f64",
            WireMessage::SampleReply {
                value: Value::F64(1.0),
            },
        ),
        (
            "sample_reply_i64",
            WireMessage::SampleReply {
                value: Value::I64(1),
            },
        ),
        (
            "sample_reply_empty_tensor",
            WireMessage::SampleReply {
                value: Value::empty(),
            },
        ),
        (
            "observe_mvn",
            WireMessage::ObserveNotify {
                address: "d/MultivariateNormalDiag".into(),
                distribution: Distribution::MultivariateNormalDiag {
                    means: vec![0.0, 1.0],
                    stds: vec![1.0, 0.5],
                },
                observed_value: Value::Tensor(TensorValue {
                    shape: vec![2],
                    data: vec![0.5, -1.0],
                }),
            },
        ),
        (
            "observe_empty_value",
            WireMessage::ObserveNotify {
                address: "y/Normal".into(),
                distribution: Distribution::Normal {
                    mean: 0.0,
                    std: 1.0,
                },
                observed_value: Value::empty(),
            },
        ),
        ("observe_ack", WireMessage::ObserveAck),
    ]
}

/// Parses space-separated hex bytes.
pub fn from_hex(s: &str) -> Option<Vec<u8>> {
    s.split_whitespace()
        .map(|b| u8::from_str_radix(b, 16).ok())
        .collect()
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .map(|b| format!("{b:02X}"))
        .collect::<Vec<_>>()
        .join(" ")
}
