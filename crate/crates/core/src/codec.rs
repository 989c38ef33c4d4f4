//! Binary model-state codec (`.apfl` files and all parameter payloads).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "APFL" | version u8 (=1) | entry count u32
//! per entry: name_len u16 | name utf-8 | dtype u8 | rank u8 | extents u32 * rank | elements
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```

use thiserror::Error;

use crate::tensor::{DType, ModelState, Tensor, TensorData, TensorError};

pub const MAGIC: [u8; 4] = *b"APFL";
pub const FORMAT_VERSION: u8 = 0x01;
/// Conventional file suffix for encoded model states.
pub const FILE_SUFFIX: &str = "apfl";

const HEADER_LEN: usize = 4 + 1 + 4;
const TRAILER_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CorruptPayload { stored: u32, computed: u32 },
    #[error("input truncated")]
    Truncated,
    #[error("malformed state: {0}")]
    Malformed(String),
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Hex SHA-256 of the encoded state; equal digests mean bit-identical states.
pub fn state_digest(state: &ModelState) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(encode_state(state)))
}

pub fn encode_state(state: &ModelState) -> Vec<u8> {
    let body: usize = state
        .iter()
        .map(|(n, t)| 2 + n.len() + 2 + 4 * t.rank() + t.byte_len())
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, tensor) in state.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.dtype().code());
        out.push(tensor.rank() as u8);
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match tensor.data() {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated)?;
        let slice = self.buf.get(self.pos..end).ok_or(CodecError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_state(bytes: &[u8]) -> Result<ModelState, CodecError> {
    if bytes.len() < MAGIC.len() {
        return Err(CodecError::Truncated);
    }
    if bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    if bytes.len() < 5 {
        return Err(CodecError::Truncated);
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(CodecError::UnsupportedVersion(bytes[4]));
    }
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(CodecError::Truncated);
    }
    let (content, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32(content);
    if stored != computed {
        return Err(CodecError::CorruptPayload { stored, computed });
    }

    let mut r = Reader { buf: content, pos: 5 };
    let count = r.u32()?;
    let mut state = ModelState::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CodecError::Malformed("entry name is not UTF-8".into()))?
            .to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| CodecError::Malformed(format!("unknown dtype code {code}")))?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            numel = numel.checked_mul(d).ok_or(CodecError::Truncated)?;
            dims.push(d);
        }
        let raw = r.take(numel.checked_mul(dtype.size_of()).ok_or(CodecError::Truncated)?)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        let tensor = Tensor::new(dims, data).map_err(|e| CodecError::Malformed(e.to_string()))?;
        state.insert(name, tensor).map_err(|e| match e {
            TensorError::DuplicateName(n) => CodecError::Malformed(format!("duplicate entry {n}")),
            other => CodecError::Malformed(other.to_string()),
        })?;
    }
    if r.pos != content.len() {
        return Err(CodecError::Malformed(format!(
            "{} trailing bytes after last entry",
            content.len() - r.pos
        )));
    }
    Ok(state)
}
