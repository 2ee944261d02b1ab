//! Framing and message codecs.
//!
//! A frame is `[u32 BE payload length][u8 type][payload]`. Integers and
//! scalar floats inside payloads are big-endian; tensor element data is
//! little-endian `f32`.

use std::io::{self, Read, Write};

use edgent_core::kernels::Tensor;
use thiserror::Error;

/// Largest payload accepted, checked before anything is allocated.
pub const MAX_PAYLOAD: u32 = 64 << 20;

pub const HELLO: u8 = 0x01;
pub const INPUT: u8 = 0x02;
pub const INTERMEDIATE: u8 = 0x03;
pub const RESULT: u8 = 0x04;
pub const TIMING: u8 = 0x05;
pub const PROBE: u8 = 0x06;
pub const ERROR: u8 = 0x7F;

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("declared payload of {0} bytes exceeds the {MAX_PAYLOAD} byte limit")]
    FrameTooLarge(u32),
    /// The payload was consumed, so the stream is still aligned.
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("malformed {kind} payload: {reason}")]
    Malformed { kind: &'static str, reason: String },
}

impl WireError {
    /// Whether the stream is still aligned on a frame boundary.
    pub fn is_recoverable(&self) -> bool {
        matches!(self, WireError::UnknownType(_))
    }
}

/// How the segments are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Reference kernels with seeded weights.
    Kernels,
    /// Sleep for the predicted segment latency.
    Delay,
}

impl Mode {
    fn code(self) -> u8 {
        match self {
            Mode::Kernels => 0,
            Mode::Delay => 1,
        }
    }

    fn from_code(code: u8) -> Option<Mode> {
        match code {
            0 => Some(Mode::Kernels),
            1 => Some(Mode::Delay),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Kernels => "kernels",
            Mode::Delay => "delay",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kernels" => Ok(Mode::Kernels),
            "delay" | "calibrated-delay" => Ok(Mode::Delay),
            _ => Err(format!("unknown mode `{s}` (expected kernels or delay)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    PlanMismatch = 1,
    FrameTooLarge = 2,
    Malformed = 3,
    UnknownType = 4,
    UnexpectedMessage = 5,
    ModeMismatch = 6,
    ModelMismatch = 7,
    Internal = 8,
}

impl ErrorCode {
    const ALL: [ErrorCode; 8] = [
        ErrorCode::PlanMismatch,
        ErrorCode::FrameTooLarge,
        ErrorCode::Malformed,
        ErrorCode::UnknownType,
        ErrorCode::UnexpectedMessage,
        ErrorCode::ModeMismatch,
        ErrorCode::ModelMismatch,
        ErrorCode::Internal,
    ];

    pub fn from_u16(v: u16) -> Option<ErrorCode> {
        Self::ALL.into_iter().find(|c| *c as u16 == v)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::PlanMismatch => "plan-mismatch",
            ErrorCode::FrameTooLarge => "frame-too-large",
            ErrorCode::Malformed => "malformed",
            ErrorCode::UnknownType => "unknown-type",
            ErrorCode::UnexpectedMessage => "unexpected-message",
            ErrorCode::ModeMismatch => "mode-mismatch",
            ErrorCode::ModelMismatch => "model-mismatch",
            ErrorCode::Internal => "internal",
        }
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub model: String,
    pub exit: u32,
    /// Number of layers the edge runs.
    pub partition: u32,
    pub mode: Mode,
}

/// Edge-side phase durations of one session.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub input_receive_ms: f64,
    pub edge_compute_ms: f64,
    pub output_send_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Input(Tensor),
    Intermediate { layer: u32, tensor: Tensor },
    Result { class: u32, confidence: f32 },
    Timing(Timing),
    Probe(Vec<u8>),
    Error { code: ErrorCode, message: String },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello(_) => HELLO,
            Message::Input(_) => INPUT,
            Message::Intermediate { .. } => INTERMEDIATE,
            Message::Result { .. } => RESULT,
            Message::Timing(_) => TIMING,
            Message::Probe(_) => PROBE,
            Message::Error { .. } => ERROR,
        }
    }

    pub fn name(&self) -> &'static str {
        type_name(self.type_byte())
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Message {
        Message::Error {
            code,
            message: message.into(),
        }
    }
}

pub fn type_name(t: u8) -> &'static str {
    match t {
        HELLO => "HELLO",
        INPUT => "INPUT",
        INTERMEDIATE => "INTERMEDIATE",
        RESULT => "RESULT",
        TIMING => "TIMING",
        PROBE => "PROBE",
        ERROR => "ERROR",
        _ => "UNKNOWN",
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.dims().len() as u32).to_be_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.reserve(t.byte_len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let bytes = &s.as_bytes()[..s.len().min(u16::MAX as usize)];
    out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Payload bytes of `msg`, without the frame header.
pub fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Hello(h) => {
            put_str(&mut out, &h.model);
            out.extend_from_slice(&h.exit.to_be_bytes());
            out.extend_from_slice(&h.partition.to_be_bytes());
            out.push(h.mode.code());
        }
        Message::Input(t) => put_tensor(&mut out, t),
        Message::Intermediate { layer, tensor } => {
            out.extend_from_slice(&layer.to_be_bytes());
            put_tensor(&mut out, tensor);
        }
        Message::Result { class, confidence } => {
            out.extend_from_slice(&class.to_be_bytes());
            out.extend_from_slice(&confidence.to_be_bytes());
        }
        Message::Timing(t) => {
            for v in [t.input_receive_ms, t.edge_compute_ms, t.output_send_ms] {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        Message::Probe(blob) => out.extend_from_slice(blob),
        Message::Error { code, message } => {
            out.extend_from_slice(&(*code as u16).to_be_bytes());
            put_str(&mut out, message);
        }
    }
    out
}

/// Header plus payload.
pub fn encode(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut frame = Vec::with_capacity(5 + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.push(msg.type_byte());
    frame.extend_from_slice(&payload);
    frame
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()
}

struct Cursor<'a> {
    kind: &'static str,
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> WireError {
        WireError::Malformed {
            kind: self.kind,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(self.err(format!("truncated: need {n} more bytes, have {}", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor, WireError> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(self.err(format!("tensor rank {rank} not in 1..=8")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut elems: usize = 1;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            elems = elems.checked_mul(d).ok_or_else(|| self.err("tensor dims overflow"))?;
            dims.push(d);
        }
        if elems == 0 {
            return Err(self.err("tensor has no elements"));
        }
        if self.buf.len() != elems * 4 {
            return Err(self.err(format!(
                "dims {dims:?} need {} data bytes, payload has {}",
                elems * 4,
                self.buf.len()
            )));
        }
        let data = self
            .take(elems * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::new(dims, data).expect("length checked"))
    }

    fn finish<T>(self, value: T) -> Result<T, WireError> {
        if self.buf.is_empty() {
            Ok(value)
        } else {
            Err(self.err(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

pub fn decode(type_byte: u8, payload: &[u8]) -> Result<Message, WireError> {
    let mut c = Cursor {
        kind: type_name(type_byte),
        buf: payload,
    };
    match type_byte {
        HELLO => {
            let model = c.string()?;
            let exit = c.u32()?;
            let partition = c.u32()?;
            let code = c.u8()?;
            let mode = Mode::from_code(code).ok_or_else(|| c.err(format!("unknown mode {code}")))?;
            c.finish(Message::Hello(Hello {
                model,
                exit,
                partition,
                mode,
            }))
        }
        INPUT => {
            let t = c.tensor()?;
            c.finish(Message::Input(t))
        }
        INTERMEDIATE => {
            let layer = c.u32()?;
            let tensor = c.tensor()?;
            c.finish(Message::Intermediate { layer, tensor })
        }
        RESULT => {
            let class = c.u32()?;
            let confidence = c.f32()?;
            c.finish(Message::Result { class, confidence })
        }
        TIMING => {
            let t = Timing {
                input_receive_ms: c.f64()?,
                edge_compute_ms: c.f64()?,
                output_send_ms: c.f64()?,
            };
            c.finish(Message::Timing(t))
        }
        PROBE => Ok(Message::Probe(payload.to_vec())),
        ERROR => {
            let raw = c.u16()?;
            let code = ErrorCode::from_u16(raw).ok_or_else(|| c.err(format!("unknown error code {raw}")))?;
            let message = c.string()?;
            c.finish(Message::Error { code, message })
        }
        other => Err(WireError::UnknownType(other)),
    }
}

/// Reads one frame. Unknown types have their payload skipped, not buffered.
pub fn read_message<R: Read>(r: &mut R) -> Result<Message, WireError> {
    let mut header = [0u8; 5];
    r.read_exact(&mut header)?;
    let len = u32::from_be_bytes(header[..4].try_into().unwrap());
    let type_byte = header[4];
    if len > MAX_PAYLOAD {
        return Err(WireError::FrameTooLarge(len));
    }
    if type_name(type_byte) == "UNKNOWN" {
        let skipped = io::copy(&mut r.by_ref().take(len as u64), &mut io::sink())?;
        if skipped < len as u64 {
            return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into());
        }
        return Err(WireError::UnknownType(type_byte));
    }
    let mut payload = Vec::new();
    r.by_ref().take(len as u64).read_to_end(&mut payload)?;
    if payload.len() < len as usize {
        return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into());
    }
    decode(type_byte, &payload)
}
