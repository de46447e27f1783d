//! Bundles, endpoints, priorities, lifecycle and the transmission queue.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::fmt;

use chrono::Duration;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsp::{self, BabSubject, BspError, Key, SecurityBlocks};
use crate::fragment::FragmentInfo;
use crate::time::{self, Timestamp};

pub const ISS: &str = "ISS";
pub const BROADCAST: &str = "*";
pub const DEFAULT_TTL_S: u64 = 86_400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BundleError {
    #[error("plaintext must not be empty")]
    EmptyPlaintext,
    #[error("ttl must be positive")]
    ZeroTtl,
    #[error("invalid endpoint: {0}")]
    Endpoint(String),
    #[error("illegal status transition {from:?} -> {to:?} for {bundle_id}")]
    Transition {
        bundle_id: String,
        from: BundleStatus,
        to: BundleStatus,
    },
    #[error("node {node} already in hop list of {bundle_id}")]
    HopLoop { bundle_id: String, node: String },
    #[error("bundle {0} already queued")]
    Duplicate(String),
    #[error("integrity check failed for {0}")]
    Integrity(String),
    #[error(transparent)]
    Security(#[from] BspError),
    #[error("bundle document: {0}")]
    Document(String),
}

/// A node id: a station id, [`ISS`], or the [`BROADCAST`] designator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Endpoint(String);

impl Endpoint {
    pub fn new(node_id: impl Into<String>) -> Result<Self, BundleError> {
        let id = node_id.into();
        if id.trim().is_empty() || id.contains('|') {
            return Err(BundleError::Endpoint(format!("{id:?}")));
        }
        Ok(Endpoint(id))
    }

    pub fn iss() -> Self {
        Endpoint(ISS.into())
    }

    pub fn broadcast() -> Self {
        Endpoint(BROADCAST.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_broadcast(&self) -> bool {
        self.0 == BROADCAST
    }

    pub fn is_iss(&self) -> bool {
        self.0 == ISS
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Endpoint {
    type Error = BundleError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Endpoint::new(s)
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> Self {
        e.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Priority {
    Bulk = 0,
    #[default]
    Normal = 1,
    Expedited = 2,
}

impl std::str::FromStr for Priority {
    type Err = BundleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "BULK" | "0" => Ok(Priority::Bulk),
            "NORMAL" | "1" => Ok(Priority::Normal),
            "EXPEDITED" | "2" => Ok(Priority::Expedited),
            _ => Err(BundleError::Document(format!("unknown priority {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BundleStatus {
    Created,
    Queued,
    InTransit,
    Delivered,
    Failed,
    Expired,
}

impl BundleStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Delivered | Self::Failed | Self::Expired)
    }

    pub fn can_transition(self, to: BundleStatus) -> bool {
        use BundleStatus::*;
        match (self, to) {
            (Created, Queued) | (Queued, InTransit) => true,
            (InTransit, Queued | Delivered | Failed) => true,
            (from, Expired) => !from.is_terminal(),
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Created => "CREATED",
            Self::Queued => "QUEUED",
            Self::InTransit => "IN_TRANSIT",
            Self::Delivered => "DELIVERED",
            Self::Failed => "FAILED",
            Self::Expired => "EXPIRED",
        }
    }
}

impl std::str::FromStr for BundleStatus {
    type Err = BundleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
            .map_err(|_| BundleError::Document(format!("unknown status {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtnBundle {
    pub bundle_id: String,
    pub source: Endpoint,
    pub destination: Endpoint,
    pub encrypted_payload: String,
    pub payload_hash: String,
    pub priority: Priority,
    #[serde(with = "time::iso_ms")]
    pub created_at: Timestamp,
    pub ttl_s: u64,
    pub custody: bool,
    pub hop_list: Vec<String>,
    pub status: BundleStatus,
    pub security: SecurityBlocks,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragment: Option<FragmentInfo>,
}

impl BabSubject for DtnBundle {
    fn bundle_id(&self) -> &str {
        &self.bundle_id
    }
    fn source(&self) -> &str {
        self.source.as_str()
    }
    fn destination(&self) -> &str {
        self.destination.as_str()
    }
    fn payload_hash(&self) -> &str {
        &self.payload_hash
    }
}

/// Inputs to [`create_bundle`] other than key material and clock.
#[derive(Debug, Clone)]
pub struct BundleRequest<'a> {
    pub plaintext: &'a [u8],
    pub source: Endpoint,
    pub destination: Endpoint,
    pub priority: Priority,
    pub custody: bool,
    pub ttl_s: u64,
}

/// Encrypts the payload, attaches PCB and PIB, and returns a `CREATED` bundle
/// whose hop list holds only the source.
pub fn create_bundle<R: RngCore + ?Sized>(
    req: BundleRequest<'_>,
    key: &Key,
    rng: &mut R,
    now: Timestamp,
) -> Result<DtnBundle, BundleError> {
    if req.plaintext.is_empty() {
        return Err(BundleError::EmptyPlaintext);
    }
    if req.ttl_s == 0 {
        return Err(BundleError::ZeroTtl);
    }
    if req.source.is_broadcast() {
        return Err(BundleError::Endpoint("broadcast cannot be a source".into()));
    }
    let created_at = time::truncate_ms(now);
    let pcb = bsp::pcb_encrypt(req.plaintext, key, rng)?;
    let pib = bsp::pib_create(&bsp::sha256_hex(pcb.ciphertext.as_bytes()), key);
    let bundle_id = format!(
        "{}-{}-{:08x}",
        req.source,
        created_at.timestamp_millis(),
        rng.next_u32()
    );
    Ok(DtnBundle {
        bundle_id,
        hop_list: vec![req.source.to_string()],
        source: req.source,
        destination: req.destination,
        payload_hash: bsp::sha256_hex(req.plaintext),
        encrypted_payload: pcb.ciphertext.clone(),
        priority: req.priority,
        created_at,
        ttl_s: req.ttl_s,
        custody: req.custody,
        status: BundleStatus::Created,
        security: SecurityBlocks {
            pcb: pcb.block(),
            pib,
            bab: None,
        },
        fragment: None,
    })
}

impl DtnBundle {
    pub fn transition(&mut self, to: BundleStatus) -> Result<(), BundleError> {
        if self.status == to && to == BundleStatus::Queued {
            return Ok(());
        }
        if !self.status.can_transition(to) {
            return Err(BundleError::Transition {
                bundle_id: self.bundle_id.clone(),
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }

    pub fn push_hop(&mut self, node: &str) -> Result<(), BundleError> {
        if self.hop_list.iter().any(|h| h == node) {
            return Err(BundleError::HopLoop {
                bundle_id: self.bundle_id.clone(),
                node: node.to_string(),
            });
        }
        self.hop_list.push(node.to_string());
        Ok(())
    }

    pub fn current_node(&self) -> &str {
        self.hop_list.last().map(String::as_str).unwrap_or(self.source.as_str())
    }

    pub fn expires_at(&self) -> Timestamp {
        self.created_at + Duration::seconds(self.ttl_s as i64)
    }

    pub fn is_expired(&self, now: Timestamp) -> bool {
        self.expires_at() <= now
    }

    /// SHA-256 hex of the base64 ciphertext text; what the PIB signs.
    pub fn encrypted_hash(&self) -> String {
        match &self.fragment {
            Some(f) => f.parent_encrypted_hash.clone(),
            None => bsp::sha256_hex(self.encrypted_payload.as_bytes()),
        }
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string(self).expect("bundle serializes")
    }

    pub fn from_document(doc: &str) -> Result<Self, BundleError> {
        serde_json::from_str(doc).map_err(|e| BundleError::Document(e.to_string()))
    }

    /// Size in bytes of the canonical document.
    pub fn serialized_size(&self) -> usize {
        self.to_document().len()
    }

    /// Verifies the PIB and decrypts an unfragmented bundle, checking the
    /// plaintext hash.
    pub fn open(&self, key: &Key) -> Result<Vec<u8>, BundleError> {
        if self.fragment.is_some() {
            return Err(BundleError::Integrity(format!(
                "{} is a fragment; reassemble first",
                self.bundle_id
            )));
        }
        let hash = bsp::sha256_hex(self.encrypted_payload.as_bytes());
        if !bsp::pib_verify(&self.security.pib, &hash, key) {
            return Err(BundleError::Integrity(self.bundle_id.clone()));
        }
        let plain = bsp::pcb_decrypt(&self.security.pcb.with_ciphertext(&self.encrypted_payload), key)?;
        if bsp::sha256_hex(&plain) != self.payload_hash {
            return Err(BundleError::Integrity(self.bundle_id.clone()));
        }
        Ok(plain)
    }
}

type QueueKey = (Reverse<Priority>, Timestamp, String);

fn queue_key(b: &DtnBundle) -> QueueKey {
    (Reverse(b.priority), b.created_at, b.bundle_id.clone())
}

/// Transmission queue ordered by priority (highest first), then creation
/// time, then bundle id.
#[derive(Debug, Clone, Default)]
pub struct BundleQueue {
    items: BTreeMap<QueueKey, DtnBundle>,
    index: BTreeMap<String, QueueKey>,
}

impl BundleQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, mut bundle: DtnBundle) -> Result<(), BundleError> {
        if self.index.contains_key(&bundle.bundle_id) {
            return Err(BundleError::Duplicate(bundle.bundle_id));
        }
        bundle.transition(BundleStatus::Queued)?;
        let key = queue_key(&bundle);
        self.index.insert(bundle.bundle_id.clone(), key.clone());
        self.items.insert(key, bundle);
        Ok(())
    }

    pub fn next_for_transmission(&mut self) -> Option<DtnBundle> {
        let (_, b) = self.items.pop_first()?;
        self.index.remove(&b.bundle_id);
        Some(b)
    }

    pub fn peek(&self) -> Option<&DtnBundle> {
        self.items.values().next()
    }

    pub fn remove(&mut self, bundle_id: &str) -> Option<DtnBundle> {
        let key = self.index.remove(bundle_id)?;
        self.items.remove(&key)
    }

    pub fn contains(&self, bundle_id: &str) -> bool {
        self.index.contains_key(bundle_id)
    }

    pub fn get(&self, bundle_id: &str) -> Option<&DtnBundle> {
        self.index.get(bundle_id).and_then(|k| self.items.get(k))
    }

    /// Bundles in dequeue order.
    pub fn iter(&self) -> impl Iterator<Item = &DtnBundle> {
        self.items.values()
    }

    pub fn ids(&self) -> Vec<String> {
        self.iter().map(|b| b.bundle_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Removes and returns every bundle whose TTL has lapsed, marked `EXPIRED`.
    pub fn expire(&mut self, now: Timestamp) -> Vec<DtnBundle> {
        let ids: Vec<String> = self
            .items
            .values()
            .filter(|b| b.is_expired(now))
            .map(|b| b.bundle_id.clone())
            .collect();
        ids.iter()
            .filter_map(|id| self.remove(id))
            .map(|mut b| {
                b.status = BundleStatus::Expired;
                b
            })
            .collect()
    }
}

/// Marks every non-terminal bundle whose TTL has lapsed as `EXPIRED`.
pub fn expire_ttl(now: Timestamp, bundles: &mut [DtnBundle]) -> Vec<String> {
    bundles
        .iter_mut()
        .filter(|b| !b.status.is_terminal() && b.is_expired(now))
        .map(|b| {
            b.status = BundleStatus::Expired;
            b.bundle_id.clone()
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bsp::tests::test_key;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn make(
        text: &[u8],
        src: &str,
        priority: Priority,
        at: Timestamp,
        rng: &mut ChaCha8Rng,
    ) -> DtnBundle {
        create_bundle(
            BundleRequest {
                plaintext: text,
                source: Endpoint::new(src).unwrap(),
                destination: Endpoint::iss(),
                priority,
                custody: true,
                ttl_s: DEFAULT_TTL_S,
            },
            &test_key(),
            rng,
            at,
        )
        .unwrap()
    }

    #[test]
    fn created_bundle_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = time::sim_epoch();
        let b = make(b"hello", "toronto", Priority::Normal, t, &mut rng);
        assert_eq!(
            b.payload_hash,
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        assert_eq!(b.status, BundleStatus::Created);
        assert_eq!(b.hop_list, vec!["toronto"]);
        assert!(b.bundle_id.starts_with(&format!("toronto-{}-", t.timestamp_millis())));
        assert!(b.security.bab.is_none());
        assert_eq!(b.open(&test_key()).unwrap(), b"hello");
    }

    #[test]
    fn identical_inputs_give_distinct_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = time::sim_epoch();
        let a = make(b"x", "london", Priority::Normal, t, &mut rng);
        let b = make(b"x", "london", Priority::Normal, t, &mut rng);
        assert_ne!(a.bundle_id, b.bundle_id);
    }

    #[test]
    fn creation_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let req = |text: &'static [u8], ttl| BundleRequest {
            plaintext: text,
            source: Endpoint::new("a").unwrap(),
            destination: Endpoint::iss(),
            priority: Priority::Bulk,
            custody: false,
            ttl_s: ttl,
        };
        let now = time::sim_epoch();
        assert_eq!(
            create_bundle(req(b"", 5), &test_key(), &mut rng, now),
            Err(BundleError::EmptyPlaintext)
        );
        assert_eq!(
            create_bundle(req(b"a", 0), &test_key(), &mut rng, now),
            Err(BundleError::ZeroTtl)
        );
        assert!(Endpoint::new("").is_err());
    }

    #[test]
    fn document_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = make(b"payload", "tokyo", Priority::Expedited, time::sim_epoch(), &mut rng);
        let doc = b.to_document();
        assert_eq!(DtnBundle::from_document(&doc).unwrap(), b);
        let v: serde_json::Value = serde_json::from_str(&doc).unwrap();
        assert_eq!(v["priority"], "EXPEDITED");
        assert_eq!(v["status"], "CREATED");
        assert!(v.get("fragment").is_none());
    }

    #[test]
    fn lifecycle_graph() {
        use BundleStatus::*;
        let all = [Created, Queued, InTransit, Delivered, Failed, Expired];
        let allowed = [
            (Created, Queued),
            (Queued, InTransit),
            (InTransit, Queued),
            (InTransit, Delivered),
            (InTransit, Failed),
            (Created, Expired),
            (Queued, Expired),
            (InTransit, Expired),
        ];
        for from in all {
            for to in all {
                assert_eq!(from.can_transition(to), allowed.contains(&(from, to)), "{from:?}->{to:?}");
            }
        }
    }

    #[test]
    fn hop_list_rejects_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = make(b"x", "sydney", Priority::Bulk, time::sim_epoch(), &mut rng);
        b.push_hop("tokyo").unwrap();
        assert!(b.push_hop("sydney").is_err());
    }

    #[test]
    fn queue_order_priority_then_fifo_then_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t1 = time::sim_epoch();
        let t2 = t1 + Duration::seconds(5);
        let normal = make(b"a", "a", Priority::Normal, t1, &mut rng);
        let exp = make(b"b", "b", Priority::Expedited, t2, &mut rng);
        let normal_late = make(b"c", "c", Priority::Normal, t2, &mut rng);
        let mut q = BundleQueue::new();
        q.enqueue(normal_late.clone()).unwrap();
        q.enqueue(normal.clone()).unwrap();
        q.enqueue(exp.clone()).unwrap();
        assert_eq!(q.next_for_transmission().unwrap().bundle_id, exp.bundle_id);
        assert_eq!(q.next_for_transmission().unwrap().bundle_id, normal.bundle_id);
        assert_eq!(q.next_for_transmission().unwrap().bundle_id, normal_late.bundle_id);
        assert!(q.next_for_transmission().is_none());

        let mut x = make(b"x", "a", Priority::Normal, t1, &mut rng);
        let mut y = x.clone();
        x.bundle_id = "b-id".into();
        y.bundle_id = "a-id".into();
        q.enqueue(x).unwrap();
        q.enqueue(y.clone()).unwrap();
        assert_eq!(q.peek().unwrap().bundle_id, "a-id");
        assert!(matches!(q.enqueue(y), Err(BundleError::Duplicate(_))));
    }

    #[test]
    fn ttl_expiry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = time::sim_epoch();
        let mut b = make(b"x", "a", Priority::Normal, t, &mut rng);
        b.ttl_s = 10;
        let mut delivered = b.clone();
        delivered.status = BundleStatus::Delivered;
        let mut all = vec![b.clone(), delivered];
        assert!(expire_ttl(t + Duration::seconds(9), &mut all).is_empty());
        assert_eq!(expire_ttl(t + Duration::seconds(10), &mut all), vec![b.bundle_id.clone()]);
        assert_eq!(all[1].status, BundleStatus::Delivered);

        let mut q = BundleQueue::new();
        q.enqueue(b.clone()).unwrap();
        let gone = q.expire(t + Duration::seconds(11));
        assert_eq!(gone[0].status, BundleStatus::Expired);
        assert!(q.is_empty());
    }
}
