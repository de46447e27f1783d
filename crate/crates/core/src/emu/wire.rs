use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsp;
use crate::bundle::DtnBundle;

/// Upper bound on a frame body; larger length prefixes are treated as garbage.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad frame length {0}")]
    Length(usize),
    #[error("undecodable frame: {0}")]
    Decode(String),
}

/// One framed document. The `type` field tells documents apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Bundle {
        checksum: String,
        #[serde(flatten)]
        bundle: Box<DtnBundle>,
    },
    /// Plain payload with no DTN semantics, for the single-attempt baseline.
    Raw { checksum: String, payload: String },
    CustodyAck { bundle_id: String, from: String },
    CustodyNak { bundle_id: String, from: String, reason: String },
    DeliveryAck { bundle_id: String, from: String },
}

impl WireMessage {
    pub fn bundle(bundle: DtnBundle) -> Self {
        WireMessage::Bundle {
            checksum: bsp::sha256_hex(bundle.encrypted_payload.as_bytes()),
            bundle: Box::new(bundle),
        }
    }

    pub fn raw(payload: &[u8]) -> Self {
        use base64::Engine as _;
        let payload = base64::engine::general_purpose::STANDARD.encode(payload);
        WireMessage::Raw {
            checksum: bsp::sha256_hex(payload.as_bytes()),
            payload,
        }
    }

    /// True for documents without a checksum or whose checksum matches.
    pub fn checksum_ok(&self) -> bool {
        match self {
            WireMessage::Bundle { checksum, bundle } => *checksum == bsp::sha256_hex(bundle.encrypted_payload.as_bytes()),
            WireMessage::Raw { checksum, payload } => *checksum == bsp::sha256_hex(payload.as_bytes()),
            _ => true,
        }
    }

    pub fn is_ack(&self) -> bool {
        matches!(self, WireMessage::CustodyAck { .. } | WireMessage::DeliveryAck { .. })
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("wire message serializes")
    }

    pub fn decode(body: &[u8]) -> Result<Self, WireError> {
        serde_json::from_slice(body).map_err(|e| WireError::Decode(e.to_string()))
    }
}

/// Length prefix plus body.
pub fn frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<(), WireError> {
    if body.is_empty() || body.len() > MAX_FRAME {
        return Err(WireError::Length(body.len()));
    }
    w.write_all(&frame(body))?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, WireError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let n = u32::from_be_bytes(len) as usize;
    if n == 0 || n > MAX_FRAME {
        return Err(WireError::Length(n));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Ok(body)
}
