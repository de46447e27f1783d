//! Custody transfer bookkeeping: pending acknowledgments, NAK handling and
//! timeout-driven retransmission.
//!
//! The tracker only decides; the caller performs the resend and calls
//! [`CustodyTracker::register_pending`] again, which carries the retry count
//! forward. Counts are kept per `(bundle, sender)`, so re-routing a retry to a
//! different next hop does not reset the budget.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::bundle::DtnBundle;
use crate::time::{self, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CustodyConfig {
    pub ack_timeout_s: f64,
    pub max_retries: u32,
}

impl Default for CustodyConfig {
    fn default() -> Self {
        Self {
            ack_timeout_s: 30.0,
            max_retries: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AckKind {
    CustodyAck,
    CustodyNak,
    DeliveryAck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AckMessage {
    pub kind: AckKind,
    pub bundle_id: String,
    pub from: String,
    #[serde(with = "time::iso_ms")]
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingAck {
    pub bundle_id: String,
    pub sender: String,
    pub expected_from: String,
    #[serde(with = "time::iso_ms")]
    pub deadline: Timestamp,
    pub retransmit_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CustodyEffect {
    /// `custodian` accepted responsibility; the sender may drop its copy.
    Released {
        bundle_id: String,
        sender: String,
        custodian: String,
    },
    Delivered {
        bundle_id: String,
        sender: Option<String>,
    },
    /// The sender should re-route and resend; `attempt` counts retries.
    Retransmit {
        bundle_id: String,
        sender: String,
        attempt: u32,
    },
    Failed {
        bundle_id: String,
        sender: String,
    },
    Ignored {
        bundle_id: String,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, Default)]
pub struct CustodyTracker {
    cfg: CustodyConfig,
    pending: BTreeMap<(String, String), PendingAck>,
    retries: BTreeMap<(String, String), u32>,
    terminal: BTreeSet<String>,
}

impl CustodyTracker {
    pub fn new(cfg: CustodyConfig) -> Self {
        Self {
            cfg,
            ..Default::default()
        }
    }

    pub fn config(&self) -> CustodyConfig {
        self.cfg
    }

    /// Records a custody transmission from `sender` to `next_hop`. Returns
    /// `None` for non-custody bundles.
    pub fn register_pending(
        &mut self,
        bundle: &DtnBundle,
        sender: &str,
        next_hop: &str,
        now: Timestamp,
    ) -> Option<PendingAck> {
        if !bundle.custody || self.terminal.contains(&bundle.bundle_id) {
            return None;
        }
        let count = self
            .retries
            .get(&(bundle.bundle_id.clone(), sender.to_string()))
            .copied()
            .unwrap_or(0);
        let entry = PendingAck {
            bundle_id: bundle.bundle_id.clone(),
            sender: sender.to_string(),
            expected_from: next_hop.to_string(),
            deadline: now + time::from_seconds(self.cfg.ack_timeout_s),
            retransmit_count: count,
        };
        self.pending
            .insert((bundle.bundle_id.clone(), next_hop.to_string()), entry.clone());
        Some(entry)
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingAck> {
        self.pending.values()
    }

    pub fn pending_for(&self, bundle_id: &str) -> Vec<&PendingAck> {
        self.pending.values().filter(|p| p.bundle_id == bundle_id).collect()
    }

    pub fn is_terminal(&self, bundle_id: &str) -> bool {
        self.terminal.contains(bundle_id)
    }

    /// Stops tracking a bundle that ended for reasons outside custody (TTL).
    pub fn mark_terminal(&mut self, bundle_id: &str) {
        self.terminal.insert(bundle_id.to_string());
        self.pending.retain(|(b, _), _| b != bundle_id);
    }

    fn retry(&mut self, entry: PendingAck) -> CustodyEffect {
        let key = (entry.bundle_id.clone(), entry.sender.clone());
        let count = self.retries.get(&key).copied().unwrap_or(0) + 1;
        if count > self.cfg.max_retries {
            self.mark_terminal(&entry.bundle_id);
            return CustodyEffect::Failed {
                bundle_id: entry.bundle_id,
                sender: entry.sender,
            };
        }
        self.retries.insert(key, count);
        CustodyEffect::Retransmit {
            bundle_id: entry.bundle_id,
            sender: entry.sender,
            attempt: count,
        }
    }

    pub fn on_ack(&mut self, ack: &AckMessage) -> CustodyEffect {
        if self.terminal.contains(&ack.bundle_id) {
            return CustodyEffect::Ignored {
                bundle_id: ack.bundle_id.clone(),
                reason: "bundle already terminal",
            };
        }
        let key = (ack.bundle_id.clone(), ack.from.clone());
        match ack.kind {
            AckKind::CustodyAck => match self.pending.remove(&key) {
                Some(p) => CustodyEffect::Released {
                    bundle_id: p.bundle_id,
                    sender: p.sender,
                    custodian: ack.from.clone(),
                },
                None => CustodyEffect::Ignored {
                    bundle_id: ack.bundle_id.clone(),
                    reason: "no pending custody for this hop",
                },
            },
            AckKind::DeliveryAck => {
                let sender = self.pending.get(&key).map(|p| p.sender.clone());
                self.mark_terminal(&ack.bundle_id);
                CustodyEffect::Delivered {
                    bundle_id: ack.bundle_id.clone(),
                    sender,
                }
            }
            AckKind::CustodyNak => match self.pending.remove(&key) {
                Some(p) => self.retry(p),
                None => CustodyEffect::Ignored {
                    bundle_id: ack.bundle_id.clone(),
                    reason: "no pending custody for this hop",
                },
            },
        }
    }

    pub fn on_timeout(&mut self, now: Timestamp) -> Vec<CustodyEffect> {
        let due: Vec<(String, String)> = self
            .pending
            .iter()
            .filter(|(_, p)| p.deadline <= now)
            .map(|(k, _)| k.clone())
            .collect();
        let mut effects = Vec::new();
        for k in due {
            if let Some(p) = self.pending.remove(&k) {
                effects.push(self.retry(p));
            }
        }
        effects
    }

    /// Earliest deadline among pending entries.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.pending.values().map(|p| p.deadline).min()
    }

    pub fn timeout(&self) -> Duration {
        time::from_seconds(self.cfg.ack_timeout_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::tests::make;
    use crate::bundle::Priority;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(custody: bool) -> DtnBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = make(b"x", "a", Priority::Normal, time::sim_epoch(), &mut rng);
        b.custody = custody;
        b
    }

    fn ack(kind: AckKind, b: &DtnBundle, from: &str) -> AckMessage {
        AckMessage {
            kind,
            bundle_id: b.bundle_id.clone(),
            from: from.into(),
            at: time::sim_epoch(),
        }
    }

    #[test]
    fn register_sets_deadline() {
        let mut tr = CustodyTracker::new(CustodyConfig::default());
        let t = time::sim_epoch();
        let p = tr.register_pending(&bundle(true), "a", "b", t).unwrap();
        assert_eq!(p.deadline, t + Duration::seconds(30));
        assert!(tr.register_pending(&bundle(false), "a", "b", t).is_none());
    }

    #[test]
    fn ack_clears_pending() {
        let mut tr = CustodyTracker::new(CustodyConfig::default());
        let b = bundle(true);
        tr.register_pending(&b, "a", "b", time::sim_epoch());
        assert!(matches!(
            tr.on_ack(&ack(AckKind::CustodyAck, &b, "b")),
            CustodyEffect::Released { .. }
        ));
        assert_eq!(tr.pending().count(), 0);
        assert!(matches!(
            tr.on_ack(&ack(AckKind::CustodyAck, &b, "b")),
            CustodyEffect::Ignored { .. }
        ));
    }

    #[test]
    fn nak_retries_immediately_and_count_carries() {
        let mut tr = CustodyTracker::new(CustodyConfig::default());
        let b = bundle(true);
        let t = time::sim_epoch();
        tr.register_pending(&b, "a", "b", t);
        assert_eq!(
            tr.on_ack(&ack(AckKind::CustodyNak, &b, "b")),
            CustodyEffect::Retransmit {
                bundle_id: b.bundle_id.clone(),
                sender: "a".into(),
                attempt: 1
            }
        );
        let again = tr.register_pending(&b, "a", "c", t).unwrap();
        assert_eq!(again.retransmit_count, 1);
    }

    #[test]
    fn five_retries_then_failed() {
        let mut tr = CustodyTracker::new(CustodyConfig::default());
        let b = bundle(true);
        let mut t = time::sim_epoch();
        let mut attempts = 0;
        loop {
            tr.register_pending(&b, "a", "b", t);
            attempts += 1;
            assert!(tr.on_timeout(t + Duration::seconds(29)).is_empty());
            t += Duration::seconds(30);
            match tr.on_timeout(t).as_slice() {
                [CustodyEffect::Retransmit { attempt, .. }] => assert_eq!(*attempt, attempts),
                [CustodyEffect::Failed { .. }] => break,
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(attempts, 6);
        assert!(tr.is_terminal(&b.bundle_id));
        assert!(matches!(
            tr.on_ack(&ack(AckKind::CustodyAck, &b, "b")),
            CustodyEffect::Ignored { .. }
        ));
        assert!(tr.register_pending(&b, "a", "b", t).is_none());
    }

    #[test]
    fn delivery_ack_is_terminal() {
        let mut tr = CustodyTracker::new(CustodyConfig::default());
        let b = bundle(true);
        tr.register_pending(&b, "a", "ISS", time::sim_epoch());
        assert_eq!(
            tr.on_ack(&ack(AckKind::DeliveryAck, &b, "ISS")),
            CustodyEffect::Delivered {
                bundle_id: b.bundle_id.clone(),
                sender: Some("a".into())
            }
        );
        assert!(tr.pending_for(&b.bundle_id).is_empty());
        assert!(tr.on_timeout(time::sim_epoch() + Duration::hours(1)).is_empty());
    }
}
