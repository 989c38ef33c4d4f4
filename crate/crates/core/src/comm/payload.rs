//! Inline versus object-store payloads.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::{ObjectStore, StoreError};
use super::CommError;
use crate::codec::crc32;

/// Payloads up to this many bytes travel inside the message.
pub const DEFAULT_INLINE_THRESHOLD: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PayloadRef {
    Inline {
        #[serde(skip)]
        bytes: Vec<u8>,
    },
    ObjectRef {
        key: String,
        size: u64,
        crc32: u32,
    },
}

impl PayloadRef {
    pub fn inline(bytes: Vec<u8>) -> Self {
        PayloadRef::Inline { bytes }
    }

    pub fn empty() -> Self {
        PayloadRef::Inline { bytes: Vec::new() }
    }

    pub fn is_inline(&self) -> bool {
        matches!(self, PayloadRef::Inline { .. })
    }

    /// Size of the referenced payload, wherever it lives.
    pub fn size(&self) -> u64 {
        match self {
            PayloadRef::Inline { bytes } => bytes.len() as u64,
            PayloadRef::ObjectRef { size, .. } => *size,
        }
    }
}

pub fn content_key(bytes: &[u8]) -> String {
    format!("payload/{}", hex::encode(Sha256::digest(bytes)))
}

fn store_error(e: StoreError) -> CommError {
    match e {
        StoreError::NotFound(k) => CommError::ObjectMissing(k),
        StoreError::InvalidKey(k) => CommError::StoreUnavailable(format!("invalid key {k:?}")),
        StoreError::Unavailable(m) => CommError::StoreUnavailable(m),
    }
}

/// Inline when `bytes.len() <= inline_threshold`; otherwise stored under its
/// content hash and referenced by key, size and CRC-32.
pub fn make_payload(bytes: Vec<u8>, store: &dyn ObjectStore, inline_threshold: usize) -> Result<PayloadRef, CommError> {
    if bytes.len() <= inline_threshold {
        return Ok(PayloadRef::Inline { bytes });
    }
    let key = content_key(&bytes);
    if !store.exists(&key).map_err(store_error)? {
        store.put(&key, &bytes).map_err(store_error)?;
    }
    Ok(PayloadRef::ObjectRef {
        key,
        size: bytes.len() as u64,
        crc32: crc32(&bytes),
    })
}

/// The payload bytes; stored objects are checked against the recorded size
/// and CRC-32 first.
pub fn resolve_payload(payload: &PayloadRef, store: &dyn ObjectStore) -> Result<Vec<u8>, CommError> {
    match payload {
        PayloadRef::Inline { bytes } => Ok(bytes.clone()),
        PayloadRef::ObjectRef { key, size, crc32: want } => {
            let bytes = store.get(key).map_err(store_error)?;
            if bytes.len() as u64 != *size {
                return Err(CommError::IntegrityFailure {
                    key: key.clone(),
                    detail: format!("size {} != recorded {size}", bytes.len()),
                });
            }
            let got = crc32(&bytes);
            if got != *want {
                return Err(CommError::IntegrityFailure {
                    key: key.clone(),
                    detail: format!("crc {got:08x} != recorded {want:08x}"),
                });
            }
            Ok(bytes)
        }
    }
}
