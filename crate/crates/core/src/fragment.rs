//! Splitting over-MTU bundles and reassembling them at the destination.
//!
//! Fragments carry slices of the parent's base64 ciphertext, so nothing is
//! re-encrypted. Each fragment keeps the parent's PCB/PIB; the PIB signs the
//! hash of the whole ciphertext, which a lone fragment cannot recompute, so the
//! fragment also carries that hash and a MAC binding its chunk to the parent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsp::{self, Key};
use crate::bundle::{BundleError, DtnBundle};
use crate::time::{self, Timestamp};

pub const DEFAULT_MTU: usize = 4096;
pub const DEFAULT_HEADER_RESERVE: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FragmentError {
    #[error("mtu {mtu} must exceed header reserve {reserve}")]
    Mtu { mtu: usize, reserve: usize },
    #[error("{0} is not a fragment")]
    NotAFragment(String),
    #[error("fragment {0} failed integrity verification")]
    Integrity(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("reassembly of {0} is incomplete")]
    Incomplete(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentInfo {
    pub parent_id: String,
    pub fragment_number: u32,
    pub total_fragments: u32,
    /// SHA-256 hex of the parent's full base64 ciphertext.
    pub parent_encrypted_hash: String,
    /// HMAC over `parent_id|fragment_number|total_fragments|sha256(chunk)`.
    pub chunk_mac: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentConfig {
    pub mtu: usize,
    pub header_reserve: usize,
}

impl Default for FragmentConfig {
    fn default() -> Self {
        Self {
            mtu: DEFAULT_MTU,
            header_reserve: DEFAULT_HEADER_RESERVE,
        }
    }
}

impl FragmentConfig {
    pub fn chunk_size(&self) -> Result<usize, FragmentError> {
        if self.mtu <= self.header_reserve {
            return Err(FragmentError::Mtu {
                mtu: self.mtu,
                reserve: self.header_reserve,
            });
        }
        Ok(self.mtu - self.header_reserve)
    }
}

fn chunk_message(parent_id: &str, n: u32, total: u32, chunk: &str) -> String {
    format!("{parent_id}|{n}|{total}|{}", bsp::sha256_hex(chunk.as_bytes()))
}

fn chunk_mac(key: &Key, parent_id: &str, n: u32, total: u32, chunk: &str) -> String {
    // reuse the PIB primitive: HMAC-SHA256 hex over a text message
    bsp::pib_create(&chunk_message(parent_id, n, total, chunk), key).signature
}

/// Returns `[bundle]` when its document fits in the MTU, otherwise one
/// fragment per `mtu - header_reserve` characters of ciphertext.
pub fn maybe_fragment(
    bundle: &DtnBundle,
    cfg: FragmentConfig,
    key: &Key,
) -> Result<Vec<DtnBundle>, FragmentError> {
    let chunk_size = cfg.chunk_size()?;
    if bundle.serialized_size() <= cfg.mtu || bundle.fragment.is_some() {
        return Ok(vec![bundle.clone()]);
    }
    let payload = bundle.encrypted_payload.as_bytes();
    // base64 is ASCII so byte chunks are valid strings
    let chunks: Vec<&str> = payload
        .chunks(chunk_size)
        .map(|c| std::str::from_utf8(c).expect("base64 is ASCII"))
        .collect();
    let total = chunks.len() as u32;
    let parent_hash = bsp::sha256_hex(payload);
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(i, chunk)| {
            let n = i as u32;
            DtnBundle {
                bundle_id: format!("{}-f{n}", bundle.bundle_id),
                encrypted_payload: chunk.to_string(),
                security: crate::bsp::SecurityBlocks {
                    bab: None,
                    ..bundle.security.clone()
                },
                fragment: Some(FragmentInfo {
                    parent_id: bundle.bundle_id.clone(),
                    fragment_number: n,
                    total_fragments: total,
                    parent_encrypted_hash: parent_hash.clone(),
                    chunk_mac: chunk_mac(key, &bundle.bundle_id, n, total, chunk),
                }),
                ..bundle.clone()
            }
        })
        .collect())
}

/// Checks the PIB against the carried parent hash and the chunk MAC.
pub fn verify_fragment(fragment: &DtnBundle, key: &Key) -> Result<(), FragmentError> {
    let info = fragment
        .fragment
        .as_ref()
        .ok_or_else(|| FragmentError::NotAFragment(fragment.bundle_id.clone()))?;
    let pib_ok = bsp::pib_verify(&fragment.security.pib, &info.parent_encrypted_hash, key);
    let msg = chunk_message(
        &info.parent_id,
        info.fragment_number,
        info.total_fragments,
        &fragment.encrypted_payload,
    );
    let mac_ok = bsp::pib_verify(
        &bsp::Pib {
            signature: info.chunk_mac.clone(),
        },
        &msg,
        key,
    );
    if pib_ok && mac_ok && info.fragment_number < info.total_fragments {
        Ok(())
    } else {
        Err(FragmentError::Integrity(fragment.bundle_id.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AcceptOutcome {
    Stored,
    Duplicate,
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReassemblyBuffer {
    pub parent_id: String,
    pub received: BTreeMap<u32, String>,
    pub total_expected: u32,
    pub first_seen: Timestamp,
    /// Most recent fragment; supplies the parent's metadata on reassembly.
    pub last: DtnBundle,
}

impl ReassemblyBuffer {
    pub fn is_complete(&self) -> bool {
        self.received.len() as u32 == self.total_expected
    }

    pub fn progress(&self) -> (u32, u32) {
        (self.received.len() as u32, self.total_expected)
    }
}

/// Per-node reassembly state keyed by parent id.
#[derive(Debug, Clone, Default)]
pub struct ReassemblyBuffers {
    buffers: BTreeMap<String, ReassemblyBuffer>,
}

impl ReassemblyBuffers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, parent_id: &str) -> Option<&ReassemblyBuffer> {
        self.buffers.get(parent_id)
    }

    pub fn take(&mut self, parent_id: &str) -> Option<ReassemblyBuffer> {
        self.buffers.remove(parent_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReassemblyBuffer> {
        self.buffers.values()
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    /// Drops buffers whose parent TTL has lapsed; returns their parent ids.
    pub fn evict_expired(&mut self, now: Timestamp) -> Vec<String> {
        let stale: Vec<String> = self
            .buffers
            .values()
            .filter(|b| b.last.is_expired(now))
            .map(|b| b.parent_id.clone())
            .collect();
        for id in &stale {
            self.buffers.remove(id);
        }
        stale
    }
}

/// Verifies and stores one arriving fragment. A rejected fragment leaves the
/// buffers untouched.
pub fn accept_fragment(
    buffers: &mut ReassemblyBuffers,
    fragment: &DtnBundle,
    key: &Key,
    now: Timestamp,
) -> Result<AcceptOutcome, FragmentError> {
    verify_fragment(fragment, key)?;
    let info = fragment.fragment.as_ref().expect("verified above");
    let buf = buffers
        .buffers
        .entry(info.parent_id.clone())
        .or_insert_with(|| ReassemblyBuffer {
            parent_id: info.parent_id.clone(),
            received: BTreeMap::new(),
            total_expected: info.total_fragments,
            first_seen: now,
            last: fragment.clone(),
        });
    if buf.total_expected != info.total_fragments {
        return Err(FragmentError::Protocol(format!(
            "{} announces {} fragments, buffer expects {}",
            fragment.bundle_id, info.total_fragments, buf.total_expected
        )));
    }
    if buf.received.contains_key(&info.fragment_number) {
        return Ok(AcceptOutcome::Duplicate);
    }
    buf.received
        .insert(info.fragment_number, fragment.encrypted_payload.clone());
    buf.last = fragment.clone();
    Ok(if buf.is_complete() {
        AcceptOutcome::Complete
    } else {
        AcceptOutcome::Stored
    })
}

/// Concatenates the chunks in order, checks the ciphertext hash, decrypts and
/// checks the plaintext hash. Returns the rebuilt parent and its plaintext.
pub fn reassemble(buffer: &ReassemblyBuffer, key: &Key) -> Result<(DtnBundle, Vec<u8>), FragmentError> {
    if !buffer.is_complete() {
        return Err(FragmentError::Incomplete(buffer.parent_id.clone()));
    }
    let ciphertext: String = buffer.received.values().map(String::as_str).collect();
    let info = buffer.last.fragment.as_ref().expect("buffer holds fragments");
    if bsp::sha256_hex(ciphertext.as_bytes()) != info.parent_encrypted_hash {
        return Err(FragmentError::Integrity(buffer.parent_id.clone()));
    }
    let parent = DtnBundle {
        bundle_id: buffer.parent_id.clone(),
        encrypted_payload: ciphertext,
        fragment: None,
        ..buffer.last.clone()
    };
    let plain = parent.open(key)?;
    Ok((parent, plain))
}

/// Seconds a buffer has been waiting; used for reporting.
pub fn buffer_age(buffer: &ReassemblyBuffer, now: Timestamp) -> f64 {
    time::seconds(now - buffer.first_seen)
}
