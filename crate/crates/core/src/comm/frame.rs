//! Wire frames: `u32` LE header length, UTF-8 JSON header, then the inline
//! payload bytes (their count is the header's `payload_len`).

use std::io::{Read, Write};

use serde_json::Value;

use super::envelope::{ResultEnvelope, TaskEnvelope};
use super::payload::PayloadRef;
use super::CommError;

pub const MAX_HEADER_LEN: usize = 16 << 20;
pub const MAX_PAYLOAD_LEN: u64 = 4 << 30;

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Task(TaskEnvelope),
    Result(ResultEnvelope),
    /// First frame an endpoint sends after connecting.
    Hello { endpoint_id: String },
}

impl Frame {
    fn kind(&self) -> &'static str {
        match self {
            Frame::Task(_) => "task",
            Frame::Result(_) => "result",
            Frame::Hello { .. } => "hello",
        }
    }

    fn payload(&self) -> Option<&PayloadRef> {
        match self {
            Frame::Task(t) => Some(&t.payload),
            Frame::Result(r) => Some(&r.payload),
            Frame::Hello { .. } => None,
        }
    }

    fn inline_bytes(&self) -> &[u8] {
        match self.payload() {
            Some(PayloadRef::Inline { bytes }) => bytes,
            _ => &[],
        }
    }
}

fn header_json(frame: &Frame) -> Vec<u8> {
    let mut header = match frame {
        Frame::Task(t) => serde_json::to_value(t),
        Frame::Result(r) => serde_json::to_value(r),
        Frame::Hello { endpoint_id } => Ok(serde_json::json!({ "endpoint_id": endpoint_id })),
    }
    .expect("envelopes serialize");
    let obj = header.as_object_mut().expect("envelopes serialize to objects");
    obj.insert("kind".into(), Value::from(frame.kind()));
    obj.insert("payload_len".into(), Value::from(frame.inline_bytes().len() as u64));
    serde_json::to_vec(&header).expect("json values serialize")
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let header = header_json(frame);
    let payload = frame.inline_bytes();
    let mut out = Vec::with_capacity(4 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    out
}

fn malformed(e: impl std::fmt::Display) -> CommError {
    CommError::MalformedHeader(e.to_string())
}

/// Parses a header, returning the frame (inline payload still empty) and the
/// declared payload length.
fn parse_header(bytes: &[u8]) -> Result<(Frame, u64), CommError> {
    let value: Value = serde_json::from_slice(bytes).map_err(malformed)?;
    let Value::Object(mut obj) = value else {
        return Err(malformed("header is not a JSON object"));
    };
    let kind = match obj.remove("kind") {
        Some(Value::String(k)) => k,
        _ => return Err(malformed("missing kind")),
    };
    let payload_len = obj
        .remove("payload_len")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing payload_len"))?;
    let frame = match kind.as_str() {
        "task" => Frame::Task(serde_json::from_value(Value::Object(obj)).map_err(malformed)?),
        "result" => Frame::Result(serde_json::from_value(Value::Object(obj)).map_err(malformed)?),
        "hello" => match obj.remove("endpoint_id") {
            Some(Value::String(endpoint_id)) => Frame::Hello { endpoint_id },
            _ => return Err(malformed("hello without endpoint_id")),
        },
        other => return Err(malformed(format!("unknown frame kind {other:?}"))),
    };
    let carries_inline = matches!(frame.payload(), Some(PayloadRef::Inline { .. }));
    if payload_len > 0 && !carries_inline {
        return Err(CommError::LengthMismatch(format!(
            "{kind} frame declares {payload_len} payload bytes but has no inline payload"
        )));
    }
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(CommError::LengthMismatch(format!("payload_len {payload_len} exceeds limit")));
    }
    Ok((frame, payload_len))
}

fn attach(frame: &mut Frame, bytes: Vec<u8>) {
    match frame {
        Frame::Task(TaskEnvelope {
            payload: PayloadRef::Inline { bytes: b },
            ..
        })
        | Frame::Result(ResultEnvelope {
            payload: PayloadRef::Inline { bytes: b },
            ..
        }) => *b = bytes,
        _ => debug_assert!(bytes.is_empty()),
    }
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, CommError> {
    if bytes.len() < 4 {
        return Err(CommError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[4..];
    if header_len > rest.len() {
        return Err(CommError::Truncated {
            needed: header_len,
            available: rest.len(),
        });
    }
    let (mut frame, payload_len) = parse_header(&rest[..header_len])?;
    let body = &rest[header_len..];
    let payload_len = payload_len as usize;
    if payload_len > body.len() {
        return Err(CommError::Truncated {
            needed: payload_len,
            available: body.len(),
        });
    }
    if payload_len < body.len() {
        return Err(CommError::LengthMismatch(format!(
            "{} trailing bytes after a {payload_len}-byte payload",
            body.len() - payload_len
        )));
    }
    attach(&mut frame, body.to_vec());
    Ok(frame)
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CommError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(CommError::Truncated {
                    needed: buf.len(),
                    available: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Reads one frame from a stream. `Ok(None)` on clean end of stream before
/// any byte of a new frame.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, CommError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(CommError::Truncated {
                    needed: 4,
                    available: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header_len = u32::from_le_bytes(len) as usize;
    if header_len > MAX_HEADER_LEN {
        return Err(CommError::LengthMismatch(format!("header length {header_len} exceeds limit")));
    }
    let mut header = vec![0u8; header_len];
    read_exact_or_truncated(r, &mut header)?;
    let (mut frame, payload_len) = parse_header(&header)?;
    let mut payload = vec![0u8; payload_len as usize];
    read_exact_or_truncated(r, &mut payload)?;
    attach(&mut frame, payload);
    Ok(Some(frame))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), CommError> {
    w.write_all(&encode_frame(frame))?;
    w.flush()?;
    Ok(())
}
