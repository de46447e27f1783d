use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::Duration;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bsp::{self, Key, KeyConfig};
use crate::bundle::{self, BundleRequest, BundleStatus, DtnBundle, Endpoint, Priority, ISS};
use crate::custody::{AckKind, AckMessage, CustodyConfig, CustodyEffect, CustodyTracker};
use crate::fragment::{self, AcceptOutcome, FragmentConfig, ReassemblyBuffers};
use crate::linkbudget::{self, LinkState, RfConfig};
use crate::orbital::{self, GeodeticPosition, Propagator, PropagatorSpec, Roster};
use crate::routing::{self, BroadcastState, MeshTopology, PassOracle};
use crate::time::{self, Timestamp};

use super::metrics::{BundleTrace, Counters, MetricsRecord};
use super::scenario::ScenarioSpec;
use super::schedule::ContactSchedule;
use super::SimError;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub name: String,
    pub seed: u64,
    pub start: Timestamp,
    pub duration: Duration,
    pub tick: Duration,
    pub roster: Roster,
    pub topology: MeshTopology,
    pub schedule: ContactSchedule,
    /// Drives ISS position and link budget reporting; the schedule's own
    /// propagator when it has one.
    pub propagator: Propagator,
    pub iss_rate_bps: Option<f64>,
    pub rf: RfConfig,
    pub ground_rate_bps: f64,
    pub fragment: FragmentConfig,
    pub custody: CustodyConfig,
    pub keys: KeyConfig,
}

impl EngineConfig {
    pub fn from_spec(spec: &ScenarioSpec) -> Result<Self, SimError> {
        spec.validate()?;
        let roster = spec.roster()?;
        let topology = spec.mesh(&roster)?;
        let duration = time::from_seconds(spec.duration_s);
        let horizon = duration + time::from_seconds(spec.routing_horizon_s);
        let schedule = ContactSchedule::build(&spec.schedule, &roster, spec.start, horizon)?;
        let propagator = match schedule.propagator() {
            Some(p) => p.clone(),
            None => Propagator::from_spec(&PropagatorSpec::default())?,
        };
        Ok(Self {
            name: spec.name.clone(),
            seed: spec.seed,
            start: spec.start,
            duration,
            tick: time::from_seconds(spec.tick_s),
            roster,
            topology,
            schedule,
            propagator,
            iss_rate_bps: spec.iss_rate_bps,
            rf: spec.rf.clone(),
            ground_rate_bps: spec.ground_rate_bps,
            fragment: FragmentConfig {
                mtu: spec.mtu,
                header_reserve: spec.header_reserve,
            },
            custody: spec.custody,
            keys: spec.keys.key_config(),
        })
    }
}

/// A request to inject one bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub source: String,
    pub destination: String,
    pub plaintext: Vec<u8>,
    #[serde(default)]
    pub priority: Priority,
    #[serde(default = "yes")]
    pub custody: bool,
    #[serde(default = "default_ttl")]
    pub ttl_s: u64,
}

fn yes() -> bool {
    true
}

fn default_ttl() -> u64 {
    bundle::DEFAULT_TTL_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub bundle_id: String,
    pub status: BundleStatus,
    /// Planned route at submission; empty for broadcast.
    pub route: Vec<String>,
    pub fragments: u32,
    pub encrypted_bytes: usize,
    pub encrypted_preview: String,
}

/// Everything known about one submitted bundle, keyed by its (parent) id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRecord {
    /// The bundle as created; `status` tracks the aggregate state.
    pub bundle: DtnBundle,
    pub plaintext_bytes: usize,
    pub encrypted_bytes: usize,
    pub fragments: u32,
    #[serde(with = "time::iso_ms_opt")]
    pub delivered_at: Option<Timestamp>,
    pub hops: Option<usize>,
    pub retransmissions: u32,
    /// Planned route, replaced by the actual hop list on delivery.
    pub route: Vec<String>,
    #[serde(skip)]
    reach: BTreeSet<String>,
    #[serde(skip)]
    reached: BTreeSet<String>,
}

impl BundleRecord {
    pub fn status(&self) -> BundleStatus {
        self.bundle.status
    }

    pub fn latency_s(&self) -> Option<f64> {
        self.delivered_at.map(|d| time::seconds(d - self.bundle.created_at))
    }

    fn set_status(&mut self, to: BundleStatus) -> bool {
        if self.bundle.status.is_terminal() || self.bundle.status == to {
            return false;
        }
        self.bundle.status = to;
        true
    }

    pub fn trace(&self) -> BundleTrace {
        BundleTrace {
            bundle_id: self.bundle.bundle_id.clone(),
            source: self.bundle.source.to_string(),
            destination: self.bundle.destination.to_string(),
            priority: priority_name(self.bundle.priority).to_string(),
            plaintext_bytes: self.plaintext_bytes,
            encrypted_bytes: self.encrypted_bytes,
            fragments: self.fragments,
            created_at: self.bundle.created_at,
            delivered_at: self.delivered_at,
            status: self.bundle.status,
            latency_s: self.latency_s(),
            hops: self.hops,
            retransmissions: self.retransmissions,
            route: self.route.join(">"),
        }
    }
}

pub(crate) fn priority_name(p: Priority) -> &'static str {
    match p {
        Priority::Bulk => "BULK",
        Priority::Normal => "NORMAL",
        Priority::Expedited => "EXPEDITED",
    }
}

/// A bundle that reached its destination node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivered {
    pub bundle: DtnBundle,
    #[serde(with = "time::iso_ms")]
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    #[serde(with = "time::iso_ms")]
    pub at: Timestamp,
    pub event: String,
    pub bundle_id: String,
    pub from: String,
    pub to: String,
    pub detail: String,
}

impl TraceEvent {
    pub fn line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            time::format(&self.at),
            self.event,
            self.bundle_id,
            self.from,
            self.to,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionLog {
    pub bundle_id: String,
    pub from: String,
    pub to: String,
    #[serde(with = "time::iso_ms")]
    pub started_at: Timestamp,
    #[serde(with = "time::iso_ms")]
    pub ended_at: Timestamp,
    pub bytes: usize,
    /// `ok`, `nak` or `failed` (cut at loss of signal).
    pub outcome: String,
}

/// Changes since the last drain, for persistence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Journal {
    pub bundles: Vec<BundleRecord>,
    pub transmissions: Vec<TransmissionLog>,
    pub acks: Vec<AckMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveTransmission {
    pub bundle_id: String,
    pub from: String,
    pub to: String,
    pub bytes: usize,
    pub progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationState {
    pub id: String,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub visible: bool,
    #[serde(with = "time::iso_ms_opt")]
    pub next_aos: Option<Timestamp>,
    #[serde(with = "time::iso_ms_opt")]
    pub los: Option<Timestamp>,
    pub queue_depth: usize,
    pub link: Option<LinkState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    #[serde(with = "time::iso_ms")]
    pub timestamp: Timestamp,
    pub iss: Option<GeodeticPosition>,
    pub iss_queue_depth: usize,
    pub stations: Vec<StationState>,
    pub active: Vec<ActiveTransmission>,
    pub counters: Counters,
    pub delivered: usize,
    pub in_flight: usize,
}

#[derive(Debug, Clone)]
struct Transmission {
    bundle: DtnBundle,
    from: String,
    to: String,
    started: Timestamp,
    finish: Timestamp,
    cut_at: Option<Timestamp>,
    bytes: usize,
}

#[derive(Debug, Default)]
struct Node {
    queue: bundle::BundleQueue,
    /// Custody copies awaiting an ACK.
    held: BTreeMap<String, DtnBundle>,
    /// Broadcast copies keyed (bundle id, next hop).
    outbox: BTreeMap<(String, String), DtnBundle>,
    reassembly: ReassemblyBuffers,
    seen: BTreeSet<String>,
    inbox: BTreeMap<String, Delivered>,
}

type LinkKey = (String, String);

pub struct Engine {
    cfg: EngineConfig,
    key: Key,
    rng: ChaCha8Rng,
    ticks: i64,
    now: Timestamp,
    nodes: BTreeMap<String, Node>,
    links: BTreeMap<LinkKey, Transmission>,
    custody: CustodyTracker,
    broadcast: BroadcastState,
    acks: Vec<(String, AckMessage)>,
    records: BTreeMap<String, BundleRecord>,
    originals: BTreeMap<String, Vec<u8>>,
    scheduled: VecDeque<(Timestamp, Submission)>,
    counters: Counters,
    events: Vec<TraceEvent>,
    journal: Option<Journal>,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, SimError> {
        cfg.fragment.chunk_size()?;
        if cfg.tick <= Duration::zero() {
            return Err(SimError::Config("tick must be positive".into()));
        }
        let key = bsp::derive_key(&cfg.keys)?;
        let mut nodes = BTreeMap::new();
        nodes.insert(ISS.to_string(), Node::default());
        for id in cfg.roster.ids() {
            nodes.insert(id.to_string(), Node::default());
        }
        Ok(Self {
            key,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            ticks: 0,
            now: cfg.start,
            nodes,
            links: BTreeMap::new(),
            custody: CustodyTracker::new(cfg.custody),
            broadcast: BroadcastState::default(),
            acks: Vec::new(),
            records: BTreeMap::new(),
            originals: BTreeMap::new(),
            scheduled: VecDeque::new(),
            counters: Counters::default(),
            events: Vec::new(),
            journal: None,
            cfg,
        })
    }

    /// Engine with the scenario's injections scheduled. Random payloads are
    /// drawn from the seeded RNG in injection order.
    pub fn from_spec(spec: &ScenarioSpec) -> Result<Self, SimError> {
        let mut engine = Self::new(EngineConfig::from_spec(spec)?)?;
        for inj in spec.all_injections(&engine.cfg.roster)? {
            let plaintext = match (&inj.message, inj.size) {
                (Some(m), _) => m.as_bytes().to_vec(),
                (None, Some(n)) => {
                    let mut buf = vec![0u8; n];
                    engine.rng.fill_bytes(&mut buf);
                    buf
                }
                (None, None) => unreachable!("validated by all_injections"),
            };
            let at = spec.start + time::from_seconds(inj.at_s);
            engine.schedule(
                at,
                Submission {
                    source: inj.source,
                    destination: inj.destination,
                    plaintext,
                    priority: inj.priority,
                    custody: inj.custody,
                    ttl_s: inj.ttl_s,
                },
            )?;
        }
        Ok(engine)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn key(&self) -> &Key {
        &self.key
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn elapsed_s(&self) -> f64 {
        time::seconds(self.now - self.cfg.start)
    }

    pub fn end(&self) -> Timestamp {
        self.cfg.start + self.cfg.duration
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn records(&self) -> &BTreeMap<String, BundleRecord> {
        &self.records
    }

    pub fn record(&self, bundle_id: &str) -> Option<&BundleRecord> {
        self.records.get(bundle_id)
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    /// The event trace, one `time,event,bundle,from,to,detail` line each.
    pub fn trace_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.line());
            out.push('\n');
        }
        out
    }

    pub fn original_plaintext(&self, bundle_id: &str) -> Option<&[u8]> {
        self.originals.get(bundle_id).map(Vec::as_slice)
    }

    pub fn inbox(&self, node: &str) -> Option<&BTreeMap<String, Delivered>> {
        self.nodes.get(node).map(|n| &n.inbox)
    }

    pub fn queue_depth(&self, node: &str) -> usize {
        self.nodes.get(node).map_or(0, |n| n.queue.len())
    }

    /// Fragments received so far for partially reassembled bundles at `node`.
    pub fn reassembly_progress(&self, node: &str) -> BTreeMap<String, (u32, u32)> {
        self.nodes
            .get(node)
            .map(|n| n.reassembly.iter().map(|b| (b.parent_id.clone(), b.progress())).collect())
            .unwrap_or_default()
    }

    /// Verifies and decrypts a bundle delivered at `node`.
    pub fn decrypt_at(&self, node: &str, bundle_id: &str) -> Result<Vec<u8>, SimError> {
        let n = self.nodes.get(node).ok_or_else(|| SimError::UnknownNode(node.to_string()))?;
        let d = n
            .inbox
            .get(bundle_id)
            .ok_or_else(|| SimError::NotFound(bundle_id.to_string()))?;
        Ok(d.bundle.open(&self.key)?)
    }

    /// Start collecting [`Journal`] entries for [`Engine::drain_journal`].
    pub fn enable_journal(&mut self) {
        self.journal.get_or_insert_with(Journal::default);
    }

    pub fn drain_journal(&mut self) -> Journal {
        match self.journal.as_mut() {
            Some(j) => std::mem::take(j),
            None => Journal::default(),
        }
    }

    fn journal_bundle(&mut self, parent_id: &str) {
        if let (Some(j), Some(r)) = (self.journal.as_mut(), self.records.get(parent_id)) {
            j.bundles.push(r.clone());
        }
    }

    fn is_node(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    /// Queue a submission for `at` (processed on the first tick at or after it).
    pub fn schedule(&mut self, at: Timestamp, sub: Submission) -> Result<(), SimError> {
        self.check_submission(&sub)?;
        let pos = self.scheduled.partition_point(|(t, _)| *t <= at);
        self.scheduled.insert(pos, (at, sub));
        Ok(())
    }

    /// Validates a submission without creating anything.
    pub fn check_submission(&self, sub: &Submission) -> Result<(), SimError> {
        if !self.is_node(&sub.source) {
            return Err(SimError::UnknownNode(sub.source.clone()));
        }
        let broadcast = sub.destination == bundle::BROADCAST;
        if !broadcast && !self.is_node(&sub.destination) {
            return Err(SimError::UnknownNode(sub.destination.clone()));
        }
        if sub.source == sub.destination {
            return Err(SimError::Config("source and destination are the same node".into()));
        }
        if broadcast && sub.source == ISS {
            return Err(SimError::Config("broadcast must originate at a ground station".into()));
        }
        Ok(())
    }

    /// Creates, secures and enqueues a bundle at its source now.
    pub fn submit(&mut self, sub: Submission) -> Result<Receipt, SimError> {
        self.check_submission(&sub)?;
        let broadcast = sub.destination == bundle::BROADCAST;
        let parent = bundle::create_bundle(
            BundleRequest {
                plaintext: &sub.plaintext,
                source: Endpoint::new(&sub.source)?,
                destination: Endpoint::new(&sub.destination)?,
                priority: sub.priority,
                // flooding has no custody transfer
                custody: sub.custody && !broadcast,
                ttl_s: sub.ttl_s,
            },
            &self.key,
            &mut self.rng,
            self.now,
        )?;
        let id = parent.bundle_id.clone();
        if self.records.contains_key(&id) {
            return Err(SimError::Config(format!("duplicate bundle id {id}")));
        }
        let parts = if broadcast {
            vec![parent.clone()]
        } else {
            fragment::maybe_fragment(&parent, self.cfg.fragment, &self.key)?
        };
        let fragments = if parts.len() > 1 { parts.len() as u32 } else { 0 };
        self.counters.fragments += fragments;
        let route = self.planned_route(&sub.source, &sub.destination, &parent);
        let mut record = BundleRecord {
            bundle: parent.clone(),
            plaintext_bytes: sub.plaintext.len(),
            encrypted_bytes: bsp::encrypted_size(sub.plaintext.len()),
            fragments,
            delivered_at: None,
            hops: None,
            retransmissions: 0,
            route: route.clone(),
            reach: BTreeSet::new(),
            reached: BTreeSet::new(),
        };
        record.bundle.status = BundleStatus::Queued;
        let src = sub.source.clone();
        if broadcast {
            record.reach = self.component(&src);
            record.reached.insert(src.clone());
            let mut b = parent.clone();
            b.status = BundleStatus::Queued;
            let out = routing::flood(&b, &self.cfg.topology, &mut self.broadcast, &src);
            let node = self.nodes.get_mut(&src).expect("checked");
            node.seen.insert(id.clone());
            for (next, copy) in out {
                node.outbox.insert((id.clone(), next), copy);
            }
        } else {
            let node = self.nodes.get_mut(&src).expect("checked");
            for p in parts {
                node.seen.insert(p.bundle_id.clone());
                node.queue.enqueue(p)?;
            }
        }
        self.records.insert(id.clone(), record);
        self.originals.insert(id.clone(), sub.plaintext.clone());
        self.journal_bundle(&id);
        self.trace("inject", &id, &src, &sub.destination, format!("{}B", sub.plaintext.len()));
        if broadcast {
            self.check_broadcast_done(&id);
        }
        Ok(Receipt {
            bundle_id: id,
            status: BundleStatus::Queued,
            route,
            fragments,
            encrypted_bytes: parent.encrypted_payload.len(),
            encrypted_preview: parent.encrypted_payload.chars().take(64).collect(),
        })
    }

    fn component(&self, src: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::from([src.to_string()]);
        let mut frontier = vec![src.to_string()];
        while let Some(n) = frontier.pop() {
            for next in self.cfg.topology.neighbors(&n) {
                if seen.insert(next.to_string()) {
                    frontier.push(next.to_string());
                }
            }
        }
        seen
    }

    fn planned_route(&self, src: &str, dst: &str, b: &DtnBundle) -> Vec<String> {
        if dst == bundle::BROADCAST {
            return Vec::new();
        }
        let avoid: BTreeSet<String> = b.hop_list.iter().cloned().collect();
        self.route(src, dst, &avoid).unwrap_or_default()
    }

    fn route(&self, node: &str, dst: &str, avoid: &BTreeSet<String>) -> Option<Vec<String>> {
        let topo = &self.cfg.topology;
        let sched = &self.cfg.schedule;
        let r = if node == ISS {
            routing::route_from_iss(topo, dst, self.now, sched)
        } else if dst == ISS {
            routing::route_to_iss(topo, node, self.now, sched, avoid)
        } else {
            routing::bfs_path(topo, node, dst, avoid)
        };
        r.ok().map(|r| r.hops)
    }

    fn trace(&mut self, event: &str, bundle_id: &str, from: &str, to: &str, detail: String) {
        self.events.push(TraceEvent {
            at: self.now,
            event: event.to_string(),
            bundle_id: bundle_id.to_string(),
            from: from.to_string(),
            to: to.to_string(),
            detail,
        });
    }

    /// True once nothing is scheduled and every record is terminal.
    pub fn is_settled(&self) -> bool {
        self.scheduled.is_empty() && self.acks.is_empty() && self.records.values().all(|r| r.status().is_terminal())
    }

    /// Processes the current instant and advances one tick.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.process()?;
        self.ticks += 1;
        self.now = self.cfg.start + self.cfg.tick * self.ticks as i32;
        Ok(())
    }

    /// Steps while `now <= until`.
    pub fn run_until(&mut self, until: Timestamp) -> Result<(), SimError> {
        while self.now <= until {
            self.step()?;
        }
        Ok(())
    }

    /// Steps until settled or the configured duration has elapsed.
    pub fn run_to_completion(&mut self) -> Result<(), SimError> {
        let end = self.end();
        while self.now <= end && !self.is_settled() {
            self.step()?;
        }
        Ok(())
    }

    fn process(&mut self) -> Result<(), SimError> {
        while self.scheduled.front().is_some_and(|(t, _)| *t <= self.now) {
            let (_, sub) = self.scheduled.pop_front().expect("front checked");
            self.submit(sub)?;
        }
        self.process_acks();
        self.process_links()?;
        for eff in self.custody.on_timeout(self.now) {
            if let CustodyEffect::Retransmit { bundle_id, sender, .. } = &eff {
                self.trace("timeout", bundle_id, sender, "", String::new());
            }
            self.apply(eff)?;
        }
        self.process_expiry();
        self.start_transmissions()
    }

    fn queue_ack(&mut self, kind: AckKind, bundle_id: &str, acker: &str, recipient: &str) {
        self.acks.push((
            recipient.to_string(),
            AckMessage {
                kind,
                bundle_id: bundle_id.to_string(),
                from: acker.to_string(),
                at: self.now,
            },
        ));
    }

    fn process_acks(&mut self) {
        for (to, ack) in std::mem::take(&mut self.acks) {
            if let Some(j) = self.journal.as_mut() {
                j.acks.push(ack.clone());
            }
            let name = match ack.kind {
                AckKind::CustodyAck => "custody_ack",
                AckKind::DeliveryAck => "delivery_ack",
                AckKind::CustodyNak => "nak",
            };
            self.trace(name, &ack.bundle_id, &ack.from, &to, String::new());
            match ack.kind {
                AckKind::CustodyNak => self.counters.naks += 1,
                AckKind::DeliveryAck => {
                    self.counters.delivery_acks += 1;
                    if let Some(n) = self.nodes.get_mut(&to) {
                        n.held.remove(&ack.bundle_id);
                    }
                }
                AckKind::CustodyAck => {}
            }
            let eff = self.custody.on_ack(&ack);
            // effects on a known bundle cannot fail here
            let _ = self.apply(eff);
        }
    }

    fn parent_of(b: &DtnBundle) -> String {
        b.fragment
            .as_ref()
            .map_or_else(|| b.bundle_id.clone(), |f| f.parent_id.clone())
    }

    fn parent_id(id: &str) -> &str {
        match id.rfind("-f") {
            Some(i) if id[i + 2..].chars().all(|c| c.is_ascii_digit()) && i + 2 < id.len() => &id[..i],
            _ => id,
        }
    }

    fn set_parent_status(&mut self, parent_id: &str, to: BundleStatus) {
        let changed = self.records.get_mut(parent_id).is_some_and(|r| r.set_status(to));
        if changed {
            self.journal_bundle(parent_id);
        }
    }

    fn apply(&mut self, eff: CustodyEffect) -> Result<(), SimError> {
        match eff {
            CustodyEffect::Released { bundle_id, sender, .. } => {
                self.counters.custody_acks += 1;
                if let Some(n) = self.nodes.get_mut(&sender) {
                    n.held.remove(&bundle_id);
                }
            }
            CustodyEffect::Delivered { .. } => {}
            CustodyEffect::Retransmit {
                bundle_id,
                sender,
                attempt,
            } => {
                let Some(node) = self.nodes.get_mut(&sender) else {
                    return Ok(());
                };
                let Some(b) = node.held.remove(&bundle_id) else {
                    return Ok(());
                };
                if node.queue.contains(&bundle_id) {
                    return Ok(());
                }
                node.queue.enqueue(b)?;
                self.counters.retransmissions += 1;
                let parent = Self::parent_id(&bundle_id).to_string();
                if let Some(r) = self.records.get_mut(&parent) {
                    r.retransmissions += 1;
                }
                self.trace("retransmit", &bundle_id, &sender, "", format!("attempt {attempt}"));
            }
            CustodyEffect::Failed { bundle_id, sender } => {
                if let Some(n) = self.nodes.get_mut(&sender) {
                    n.held.remove(&bundle_id);
                }
                let parent = Self::parent_id(&bundle_id).to_string();
                self.set_parent_status(&parent, BundleStatus::Failed);
                self.trace("failed", &bundle_id, &sender, "", "retries exhausted".into());
            }
            CustodyEffect::Ignored { .. } => {}
        }
        Ok(())
    }

    fn process_links(&mut self) -> Result<(), SimError> {
        let now = self.now;
        let due: Vec<LinkKey> = self
            .links
            .iter()
            .filter(|(_, tx)| tx.finish <= now || tx.cut_at.is_some_and(|c| c <= now))
            .map(|(k, _)| k.clone())
            .collect();
        for k in due {
            let tx = self.links.remove(&k).expect("listed above");
            if tx.cut_at.is_some_and(|c| c <= now) {
                self.abort(tx)?;
            } else {
                self.arrive(tx)?;
            }
        }
        Ok(())
    }

    fn log_tx(&mut self, tx: &Transmission, outcome: &str) {
        // a cut ends at loss of signal, not at the tick that notices it
        let ended_at = tx.cut_at.filter(|c| *c < self.now).unwrap_or(self.now);
        if let Some(j) = self.journal.as_mut() {
            j.transmissions.push(TransmissionLog {
                bundle_id: tx.bundle.bundle_id.clone(),
                from: tx.from.clone(),
                to: tx.to.clone(),
                started_at: tx.started,
                ended_at,
                bytes: tx.bytes,
                outcome: outcome.to_string(),
            });
        }
    }

    fn abort(&mut self, tx: Transmission) -> Result<(), SimError> {
        self.counters.aborted += 1;
        self.log_tx(&tx, "failed");
        self.trace("cut", &tx.bundle.bundle_id, &tx.from, &tx.to, "loss of signal".into());
        // custody copies come back through the ACK timeout
        if !tx.bundle.custody {
            let mut b = tx.bundle;
            if b.destination.is_broadcast() {
                b.status = BundleStatus::Queued;
                let key = (b.bundle_id.clone(), tx.to.clone());
                self.nodes.get_mut(&tx.from).expect("node").outbox.insert(key, b);
            } else {
                self.nodes.get_mut(&tx.from).expect("node").queue.enqueue(b)?;
            }
        }
        Ok(())
    }

    fn arrive(&mut self, tx: Transmission) -> Result<(), SimError> {
        let now = self.now;
        let (from, to) = (tx.from.clone(), tx.to.clone());
        let mut b = tx.bundle.clone();
        let id = b.bundle_id.clone();
        if b.is_expired(now) {
            self.log_tx(&tx, "failed");
            self.trace("expired", &id, &from, &to, "in transit".into());
            self.custody.mark_terminal(&id);
            self.set_parent_status(&Self::parent_of(&b), BundleStatus::Expired);
            return Ok(());
        }
        let bab_ok = b
            .security
            .bab
            .as_ref()
            .is_some_and(|bab| bab.security_dest == to && bsp::bab_verify(&b, bab, &self.key));
        if !bab_ok {
            self.log_tx(&tx, "nak");
            self.queue_ack(AckKind::CustodyNak, &id, &to, &from);
            return Ok(());
        }
        if b.destination.is_broadcast() {
            self.log_tx(&tx, "ok");
            return self.arrive_broadcast(b, &from, &to);
        }
        let final_hop = b.destination.as_str() == to;
        let ack_kind = if final_hop {
            AckKind::DeliveryAck
        } else {
            AckKind::CustodyAck
        };
        let node = self.nodes.get(&to).expect("node");
        if node.seen.contains(&id) {
            self.log_tx(&tx, "ok");
            self.trace("duplicate", &id, &from, &to, String::new());
            if b.custody || final_hop {
                self.queue_ack(ack_kind, &id, &to, &from);
            }
            return Ok(());
        }
        if final_hop {
            let intact = match &b.fragment {
                Some(_) => fragment::verify_fragment(&b, &self.key).is_ok(),
                None => b.open(&self.key).is_ok(),
            };
            if !intact {
                self.log_tx(&tx, "nak");
                self.queue_ack(AckKind::CustodyNak, &id, &to, &from);
                return Ok(());
            }
        }
        self.log_tx(&tx, "ok");
        b.push_hop(&to)?;
        if b.custody || final_hop {
            self.queue_ack(ack_kind, &id, &to, &from);
        }
        self.trace("recv", &id, &from, &to, String::new());
        self.nodes.get_mut(&to).expect("node").seen.insert(id);
        if final_hop {
            self.deliver(&to, b)
        } else {
            self.nodes.get_mut(&to).expect("node").queue.enqueue(b)?;
            Ok(())
        }
    }

    fn deliver(&mut self, at: &str, mut b: DtnBundle) -> Result<(), SimError> {
        b.transition(BundleStatus::Delivered)?;
        let now = self.now;
        if b.fragment.is_none() {
            let plain_len = b.open(&self.key)?.len();
            return self.finish_delivery(at, b, plain_len);
        }
        let node = self.nodes.get_mut(at).expect("node");
        let outcome = fragment::accept_fragment(&mut node.reassembly, &b, &self.key, now)?;
        if outcome != AcceptOutcome::Complete {
            return Ok(());
        }
        let info = b.fragment.clone().expect("fragment");
        let buf = node.reassembly.take(&info.parent_id).expect("complete buffer");
        match fragment::reassemble(&buf, &self.key) {
            Ok((mut parent, plain)) => {
                parent.hop_list = b.hop_list.clone();
                self.finish_delivery(at, parent, plain.len())
            }
            Err(e) => {
                self.set_parent_status(&info.parent_id, BundleStatus::Failed);
                self.trace("failed", &info.parent_id, at, at, e.to_string());
                Ok(())
            }
        }
    }

    fn finish_delivery(&mut self, at: &str, parent: DtnBundle, plain_len: usize) -> Result<(), SimError> {
        let id = parent.bundle_id.clone();
        let hops = parent.hop_list.len().saturating_sub(1);
        let now = self.now;
        if let Some(r) = self.records.get_mut(&id) {
            if r.set_status(BundleStatus::Delivered) {
                r.delivered_at = Some(now);
                r.hops = Some(hops);
                r.route = parent.hop_list.clone();
            }
        }
        self.journal_bundle(&id);
        self.trace("deliver", &id, parent.source.as_str(), at, format!("{plain_len}B {hops} hops"));
        self.nodes
            .get_mut(at)
            .expect("node")
            .inbox
            .insert(id, Delivered { bundle: parent, at: now });
        Ok(())
    }

    fn arrive_broadcast(&mut self, mut b: DtnBundle, from: &str, to: &str) -> Result<(), SimError> {
        let id = b.bundle_id.clone();
        if self.broadcast.has_processed(to, &id) {
            self.trace("duplicate", &id, from, to, String::new());
            return Ok(());
        }
        b.push_hop(to)?;
        b.status = BundleStatus::Queued;
        self.trace("recv", &id, from, to, String::new());
        let out = routing::flood(&b, &self.cfg.topology, &mut self.broadcast, to);
        let node = self.nodes.get_mut(to).expect("node");
        node.seen.insert(id.clone());
        for (next, copy) in out {
            node.outbox.insert((id.clone(), next), copy);
        }
        node.inbox.insert(
            id.clone(),
            Delivered {
                bundle: b.clone(),
                at: self.now,
            },
        );
        if let Some(r) = self.records.get_mut(&id) {
            r.reached.insert(to.to_string());
            r.hops = Some(r.hops.unwrap_or(0).max(b.hop_list.len() - 1));
        }
        self.check_broadcast_done(&id);
        Ok(())
    }

    fn check_broadcast_done(&mut self, id: &str) {
        let now = self.now;
        let done = self.records.get_mut(id).is_some_and(|r| {
            r.reach.is_subset(&r.reached) && {
                let changed = r.set_status(BundleStatus::Delivered);
                if changed {
                    r.delivered_at = Some(now);
                    r.hops.get_or_insert(0);
                }
                changed
            }
        });
        if done {
            self.journal_bundle(id);
            self.trace("deliver", id, "", bundle::BROADCAST, "flood complete".into());
        }
    }

    fn process_expiry(&mut self) {
        let now = self.now;
        let mut expired: Vec<String> = Vec::new();
        for node in self.nodes.values_mut() {
            expired.extend(node.queue.expire(now).into_iter().map(|b| b.bundle_id));
            let stale: Vec<String> = node
                .held
                .iter()
                .filter(|(_, b)| b.is_expired(now))
                .map(|(k, _)| k.clone())
                .collect();
            for k in stale {
                node.held.remove(&k);
                expired.push(k);
            }
            node.outbox.retain(|(id, _), b| {
                let keep = !b.is_expired(now);
                if !keep {
                    expired.push(id.clone());
                }
                keep
            });
            expired.extend(node.reassembly.evict_expired(now));
        }
        for id in expired {
            self.custody.mark_terminal(&id);
            let parent = Self::parent_id(&id).to_string();
            if self.records.get(&parent).is_some_and(|r| !r.status().is_terminal()) {
                self.set_parent_status(&parent, BundleStatus::Expired);
                self.trace("expired", &parent, "", "", String::new());
            }
        }
    }

    /// Rate in bit/s for `from -> to` right now, or `None` if the link is down.
    pub fn link_rate(&self, from: &str, to: &str) -> Option<f64> {
        if from == ISS || to == ISS {
            let station = if from == ISS { to } else { from };
            if !self.cfg.schedule.is_visible(station, self.now) {
                return None;
            }
            if let Some(r) = self.cfg.iss_rate_bps {
                return Some(r);
            }
            let state = self.link_state(station, true)?;
            (state.effective_rate_bps > 0.0).then_some(state.effective_rate_bps)
        } else {
            self.cfg
                .topology
                .has_edge(from, to)
                .then_some(self.cfg.ground_rate_bps)
        }
    }

    fn link_state(&self, station: &str, visible: bool) -> Option<LinkState> {
        let gs = self.cfg.roster.get(station)?;
        let pos = self.cfg.propagator.propagate(self.now).ok()?;
        let angles = orbital::look_angles(gs, &pos);
        linkbudget::evaluate_link(&self.cfg.rf, &angles, visible).ok()
    }

    fn start_transmissions(&mut self) -> Result<(), SimError> {
        let ids: Vec<String> = self.nodes.keys().cloned().collect();
        for n in ids {
            self.start_broadcasts(&n)?;
            self.start_queued(&n)?;
        }
        Ok(())
    }

    fn start_broadcasts(&mut self, n: &str) -> Result<(), SimError> {
        let keys: Vec<(String, String)> = self.nodes[n].outbox.keys().cloned().collect();
        for (id, next) in keys {
            let link = (n.to_string(), next.clone());
            if self.links.contains_key(&link) {
                continue;
            }
            if let Some(rate) = self.link_rate(n, &next) {
                let b = self
                    .nodes
                    .get_mut(n)
                    .expect("node")
                    .outbox
                    .remove(&(id, next.clone()))
                    .expect("listed");
                self.start(n, &next, b, rate)?;
            }
        }
        Ok(())
    }

    fn start_queued(&mut self, n: &str) -> Result<(), SimError> {
        if self.nodes[n].queue.is_empty() {
            return Ok(());
        }
        // bundles sharing destination and hop list (fragments of one parent)
        // route identically, so the decision is reused while they repeat
        let mut last: Option<(String, Vec<String>, Option<String>)> = None;
        let ids = self.nodes[n].queue.ids();
        for id in ids {
            let b = self.nodes[n].queue.get(&id).expect("listed");
            let next = match &last {
                Some((d, h, next)) if d == b.destination.as_str() && *h == b.hop_list => next.clone(),
                _ => {
                    let avoid: BTreeSet<String> = b.hop_list.iter().cloned().collect();
                    let dst = b.destination.to_string();
                    let next = self.route(n, &dst, &avoid).and_then(|r| r.get(1).cloned());
                    last = Some((dst, b.hop_list.clone(), next.clone()));
                    next
                }
            };
            let Some(next) = next else { continue };
            if self.links.contains_key(&(n.to_string(), next.clone())) {
                continue;
            }
            let Some(rate) = self.link_rate(n, &next) else { continue };
            let b = self.nodes.get_mut(n).expect("node").queue.remove(&id).expect("listed");
            self.start(n, &next, b, rate)?;
        }
        Ok(())
    }

    fn start(&mut self, from: &str, to: &str, mut b: DtnBundle, rate_bps: f64) -> Result<(), SimError> {
        b.transition(BundleStatus::InTransit)?;
        b.security.bab = Some(bsp::bab_create(&b, from, to, &self.key)?);
        let bytes = b.serialized_size();
        let finish = self.now + time::from_seconds(bytes as f64 * 8.0 / rate_bps);
        let cut_at = if from == ISS || to == ISS {
            let station = if from == ISS { to } else { from };
            self.cfg
                .schedule
                .window_at(station, self.now)
                .map(|(_, los)| los)
                .filter(|los| *los < finish)
        } else {
            None
        };
        if b.custody {
            self.custody.register_pending(&b, from, to, self.now);
            self.nodes
                .get_mut(from)
                .expect("node")
                .held
                .insert(b.bundle_id.clone(), b.clone());
        }
        let parent = Self::parent_of(&b);
        self.set_parent_status(&parent, BundleStatus::InTransit);
        self.counters.transmissions += 1;
        self.trace("send", &b.bundle_id, from, to, format!("{bytes}B"));
        self.links.insert(
            (from.to_string(), to.to_string()),
            Transmission {
                bundle: b,
                from: from.to_string(),
                to: to.to_string(),
                started: self.now,
                finish,
                cut_at,
                bytes,
            },
        );
        Ok(())
    }

    pub fn metrics(&self) -> MetricsRecord {
        MetricsRecord::from_traces(
            &self.cfg.name,
            self.cfg.seed,
            self.records.values().map(BundleRecord::trace).collect(),
            self.counters,
            self.elapsed_s(),
        )
    }

    pub fn iss_position(&self) -> Option<GeodeticPosition> {
        self.cfg.propagator.propagate(self.now).ok()
    }

    pub fn station_states(&self) -> Vec<StationState> {
        let sched = &self.cfg.schedule;
        self.cfg
            .roster
            .iter()
            .map(|s| {
                let window = sched.window_at(&s.id, self.now);
                StationState {
                    id: s.id.clone(),
                    name: s.name.clone(),
                    lat: s.lat,
                    lon: s.lon,
                    visible: window.is_some(),
                    next_aos: sched.next_aos(&s.id, self.now),
                    los: window.map(|w| w.1),
                    queue_depth: self.queue_depth(&s.id),
                    link: self.link_state(&s.id, window.is_some()),
                }
            })
            .collect()
    }

    /// Contact windows for `station` starting within `horizon` of now.
    pub fn passes(&self, station: &str, horizon: Duration) -> Result<Vec<(Timestamp, Timestamp)>, SimError> {
        if self.cfg.roster.get(station).is_none() {
            return Err(SimError::UnknownNode(station.to_string()));
        }
        Ok(self
            .cfg
            .schedule
            .windows_between(station, self.now, self.now + horizon))
    }

    pub fn telemetry(&self) -> Telemetry {
        let active = self
            .links
            .values()
            .map(|tx| {
                let total = time::seconds(tx.finish - tx.started);
                let done = time::seconds(self.now - tx.started);
                ActiveTransmission {
                    bundle_id: tx.bundle.bundle_id.clone(),
                    from: tx.from.clone(),
                    to: tx.to.clone(),
                    bytes: tx.bytes,
                    progress: if total > 0.0 { (done / total).clamp(0.0, 1.0) } else { 1.0 },
                }
            })
            .collect();
        Telemetry {
            timestamp: self.now,
            iss: self.iss_position(),
            iss_queue_depth: self.queue_depth(ISS),
            stations: self.station_states(),
            active,
            counters: self.counters,
            delivered: self
                .records
                .values()
                .filter(|r| r.status() == BundleStatus::Delivered)
                .count(),
            in_flight: self.records.values().filter(|r| !r.status().is_terminal()).count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{ScheduleSpec, Stagger};

    fn spec() -> ScenarioSpec {
        ScenarioSpec {
            name: "t".into(),
            duration_s: 3.0 * 5520.0,
            keys: crate::sim::KeySpec {
                kdf_iterations: 16,
                ..Default::default()
            },
            schedule: ScheduleSpec::Synthetic {
                period_s: 5520.0,
                window_s: 480.0,
                stagger: Stagger::Longitude,
            },
            ..Default::default()
        }
    }

    fn sub(src: &str, dst: &str, text: &str) -> Submission {
        Submission {
            source: src.into(),
            destination: dst.into(),
            plaintext: text.as_bytes().to_vec(),
            priority: Priority::Normal,
            custody: true,
            ttl_s: 86_400,
        }
    }

    #[test]
    fn parent_id_strips_fragment_suffix() {
        assert_eq!(Engine::parent_id("toronto-1-0000abcd-f12"), "toronto-1-0000abcd");
        assert_eq!(Engine::parent_id("toronto-1-0000abcd"), "toronto-1-0000abcd");
        assert_eq!(Engine::parent_id("a-f"), "a-f");
    }

    #[test]
    fn bundle_reaches_iss_and_decrypts() {
        let mut e = Engine::from_spec(&spec()).unwrap();
        let r = e.submit(sub("toronto", ISS, "hello iss")).unwrap();
        assert_eq!(r.route.last().map(String::as_str), Some(ISS));
        e.run_to_completion().unwrap();
        let rec = e.record(&r.bundle_id).unwrap();
        assert_eq!(rec.status(), BundleStatus::Delivered);
        assert_eq!(e.decrypt_at(ISS, &r.bundle_id).unwrap(), b"hello iss");
    }

    #[test]
    fn iss_relay_to_station() {
        let mut e = Engine::from_spec(&spec()).unwrap();
        let r = e.submit(sub(ISS, "tokyo", "downlink")).unwrap();
        e.run_to_completion().unwrap();
        assert_eq!(e.record(&r.bundle_id).unwrap().status(), BundleStatus::Delivered);
        assert_eq!(e.decrypt_at("tokyo", &r.bundle_id).unwrap(), b"downlink");
    }

    #[test]
    fn broadcast_floods_every_station() {
        let mut e = Engine::from_spec(&spec()).unwrap();
        let r = e.submit(sub("london", bundle::BROADCAST, "all")).unwrap();
        e.run_to_completion().unwrap();
        assert_eq!(e.record(&r.bundle_id).unwrap().status(), BundleStatus::Delivered);
        for id in ["toronto", "sydney", "moscow"] {
            assert!(e.inbox(id).unwrap().contains_key(&r.bundle_id), "{id}");
        }
    }

    #[test]
    fn rejects_unknown_nodes() {
        let mut e = Engine::from_spec(&spec()).unwrap();
        assert!(matches!(e.submit(sub("atlantis", ISS, "x")), Err(SimError::UnknownNode(_))));
        assert!(e.submit(sub("toronto", "toronto", "x")).is_err());
        assert!(e.submit(sub(ISS, bundle::BROADCAST, "x")).is_err());
    }

    #[test]
    fn ttl_expiry_marks_record() {
        let mut e = Engine::from_spec(&spec()).unwrap();
        // no station is in contact between ~38 s and ~1543 s
        e.run_until(e.now() + Duration::seconds(100)).unwrap();
        let mut s = sub("toronto", ISS, "short lived");
        s.ttl_s = 60;
        let r = e.submit(s).unwrap();
        e.run_to_completion().unwrap();
        assert_eq!(e.record(&r.bundle_id).unwrap().status(), BundleStatus::Expired);
    }
}
