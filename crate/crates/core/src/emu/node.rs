use std::collections::{BTreeMap, BTreeSet};
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use chrono::Utc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bsp::{self, Key};
use crate::bundle::{self, BundleQueue, BundleRequest, BundleStatus, DtnBundle, Endpoint, ISS};
use crate::custody::{AckKind, AckMessage, CustodyConfig, CustodyEffect, CustodyTracker};
use crate::fragment::{self, AcceptOutcome, FragmentConfig, ReassemblyBuffers};
use crate::routing::{self, MeshTopology};
use crate::sim::{priority_name, BundleTrace, Counters, Submission};
use crate::time::{self, Timestamp};

use super::clock::GlobalSchedule;
use super::shaping::{shaped_send, Delivery, LinkTable, SendReport};
use super::wire::{self, WireMessage};
use super::EmuError;

const WORKER_TICK: Duration = Duration::from_millis(5);
const ACCEPT_POLL: Duration = Duration::from_millis(2);

/// One socket-level send as seen by the sender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SendRecord {
    pub bundle_id: String,
    pub from: String,
    pub to: String,
    /// Seconds since the run started.
    pub at_s: f64,
    pub report: SendReport,
}

/// Run-wide observations shared by all node workers.
#[derive(Debug, Default)]
pub(crate) struct Recorder {
    pub traces: BTreeMap<String, BundleTrace>,
    pub counters: Counters,
    pub sends: Vec<SendRecord>,
    pub events: Vec<String>,
}

impl Recorder {
    fn set_status(&mut self, parent: &str, to: BundleStatus) {
        if let Some(t) = self.traces.get_mut(parent) {
            if !t.status.is_terminal() {
                t.status = to;
            }
        }
    }
}

/// Read-only context every node of a run shares.
pub(crate) struct Shared {
    pub key: Key,
    pub topology: MeshTopology,
    pub schedule: GlobalSchedule,
    pub links: LinkTable,
    pub peers: BTreeMap<String, SocketAddr>,
    pub fragment: FragmentConfig,
    pub custody: CustodyConfig,
    pub io_timeout: Duration,
    pub started: Instant,
    pub recorder: Arc<Mutex<Recorder>>,
}

impl Shared {
    fn log(&self, line: String) {
        let at = self.started.elapsed().as_secs_f64();
        self.recorder
            .lock()
            .expect("recorder lock")
            .events
            .push(format!("{at:.3},{line}"));
    }
}

pub(crate) enum Event {
    Inbound {
        msg: WireMessage,
        reply: Sender<WireMessage>,
    },
    Inject(Submission),
    SendDone {
        peer: String,
        bundle_id: String,
        report: SendReport,
        reply: Option<WireMessage>,
    },
    Stop,
}

pub(crate) fn bind(node: &str, port: u16) -> Result<TcpListener, EmuError> {
    TcpListener::bind(("127.0.0.1", port)).map_err(|source| EmuError::Bind {
        node: node.to_string(),
        source,
    })
}

/// A running node: listener thread plus the single worker that owns the
/// node's DTN state.
pub(crate) struct NodeHandle {
    pub id: String,
    pub tx: Sender<Event>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl NodeHandle {
    pub fn spawn(id: &str, listener: TcpListener, shared: Arc<Shared>, seed: u64) -> Result<Self, EmuError> {
        listener.set_nonblocking(true)?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let (id, tx, stop, shared) = (id.to_string(), tx.clone(), stop.clone(), shared.clone());
            thread::spawn(move || accept_loop(&id, listener, tx, stop, shared))
        };
        let work = {
            let mut worker = Worker::new(id, shared, tx.clone(), seed);
            let stop = stop.clone();
            thread::spawn(move || {
                loop {
                    match rx.recv_timeout(WORKER_TICK) {
                        Ok(Event::Stop) => break,
                        Ok(ev) => worker.handle(ev),
                        Err(RecvTimeoutError::Timeout) => {}
                        Err(RecvTimeoutError::Disconnected) => break,
                    }
                    while let Ok(ev) = rx.try_recv() {
                        if matches!(ev, Event::Stop) {
                            return;
                        }
                        worker.handle(ev);
                    }
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    worker.tick();
                }
            })
        };
        Ok(Self {
            id: id.to_string(),
            tx,
            stop,
            threads: vec![accept, work],
        })
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.tx.send(Event::Stop);
        for t in self.threads {
            let _ = t.join();
        }
    }
}

fn accept_loop(id: &str, listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>, shared: Arc<Shared>) {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                let (id, tx, io_timeout) = (id.to_string(), tx.clone(), shared.io_timeout);
                thread::spawn(move || serve_connection(&id, stream, tx, io_timeout));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(_) => thread::sleep(ACCEPT_POLL),
        }
    }
}

/// Reads one frame and answers it. Malformed frames close the connection
/// without a reply; checksum failures get a NAK without reaching the worker.
fn serve_connection(id: &str, mut stream: TcpStream, tx: Sender<Event>, io_timeout: Duration) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    // the sender may be stalled by a down link, so allow a full timeout
    // beyond the largest frame
    let _ = stream.set_read_timeout(Some(io_timeout * 4));
    let Ok(body) = wire::read_frame(&mut stream) else { return };
    let Ok(msg) = WireMessage::decode(&body) else { return };
    let nak = |bundle_id: &str, reason: &str| WireMessage::CustodyNak {
        bundle_id: bundle_id.to_string(),
        from: id.to_string(),
        reason: reason.to_string(),
    };
    let reply = match &msg {
        WireMessage::Bundle { bundle, .. } if !msg.checksum_ok() => nak(&bundle.bundle_id, "checksum mismatch"),
        WireMessage::Raw { checksum, .. } if !msg.checksum_ok() => nak(checksum, "checksum mismatch"),
        WireMessage::Raw { checksum, .. } => WireMessage::DeliveryAck {
            bundle_id: checksum.clone(),
            from: id.to_string(),
        },
        WireMessage::Bundle { .. } => {
            let (rtx, rrx) = mpsc::channel();
            if tx.send(Event::Inbound { msg, reply: rtx }).is_err() {
                return;
            }
            match rrx.recv_timeout(io_timeout) {
                Ok(r) => r,
                Err(_) => return,
            }
        }
        _ => return,
    };
    let _ = wire::write_frame(&mut stream, &reply.encode());
}

struct Worker {
    id: String,
    shared: Arc<Shared>,
    tx: Sender<Event>,
    rng: ChaCha8Rng,
    queue: BundleQueue,
    /// Copies of bundles sent and not yet acknowledged.
    held: BTreeMap<String, DtnBundle>,
    custody: CustodyTracker,
    reassembly: ReassemblyBuffers,
    seen: BTreeSet<String>,
    /// Peers with a send in progress; one at a time per link.
    active: BTreeSet<String>,
}

fn parent_of(b: &DtnBundle) -> String {
    b.fragment
        .as_ref()
        .map_or_else(|| b.bundle_id.clone(), |f| f.parent_id.clone())
}

fn parent_of_id(id: &str) -> &str {
    match id.rfind("-f") {
        Some(i) if i + 2 < id.len() && id[i + 2..].chars().all(|c| c.is_ascii_digit()) => &id[..i],
        _ => id,
    }
}

impl Worker {
    fn new(id: &str, shared: Arc<Shared>, tx: Sender<Event>, seed: u64) -> Self {
        let custody = CustodyTracker::new(shared.custody);
        Self {
            id: id.to_string(),
            shared,
            tx,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BundleQueue::new(),
            held: BTreeMap::new(),
            custody,
            reassembly: ReassemblyBuffers::new(),
            seen: BTreeSet::new(),
            active: BTreeSet::new(),
        }
    }

    fn now() -> Timestamp {
        time::truncate_ms(Utc::now())
    }

    fn recorder(&self) -> std::sync::MutexGuard<'_, Recorder> {
        self.shared.recorder.lock().expect("recorder lock")
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Inbound { msg, reply } => {
                let r = self.inbound(msg);
                let _ = reply.send(r);
            }
            Event::Inject(sub) => {
                if let Err(e) = self.inject(sub) {
                    self.shared.log(format!("inject_error,{},{e}", self.id));
                }
            }
            Event::SendDone {
                peer,
                bundle_id,
                report,
                reply,
            } => self.send_done(peer, bundle_id, report, reply),
            Event::Stop => {}
        }
    }

    fn inject(&mut self, sub: Submission) -> Result<(), EmuError> {
        let now = Self::now();
        let parent = bundle::create_bundle(
            BundleRequest {
                plaintext: &sub.plaintext,
                source: Endpoint::new(&self.id)?,
                destination: Endpoint::new(&sub.destination)?,
                priority: sub.priority,
                custody: sub.custody,
                ttl_s: sub.ttl_s,
            },
            &self.shared.key,
            &mut self.rng,
            now,
        )?;
        let parts = fragment::maybe_fragment(&parent, self.shared.fragment, &self.shared.key)?;
        let fragments = if parts.len() > 1 { parts.len() as u32 } else { 0 };
        {
            let mut rec = self.recorder();
            rec.counters.fragments += fragments;
            rec.traces.insert(
                parent.bundle_id.clone(),
                BundleTrace {
                    bundle_id: parent.bundle_id.clone(),
                    source: self.id.clone(),
                    destination: sub.destination.clone(),
                    priority: priority_name(sub.priority).to_string(),
                    plaintext_bytes: sub.plaintext.len(),
                    encrypted_bytes: bsp::encrypted_size(sub.plaintext.len()),
                    fragments,
                    created_at: parent.created_at,
                    delivered_at: None,
                    status: BundleStatus::Queued,
                    latency_s: None,
                    hops: None,
                    retransmissions: 0,
                    route: String::new(),
                },
            );
        }
        self.shared
            .log(format!("inject,{},{},{}", parent.bundle_id, self.id, sub.destination));
        for p in parts {
            self.seen.insert(p.bundle_id.clone());
            self.queue.enqueue(p)?;
        }
        Ok(())
    }

    fn nak(&self, bundle_id: &str, reason: &str) -> WireMessage {
        self.shared.log(format!("nak,{bundle_id},{},{reason}", self.id));
        WireMessage::CustodyNak {
            bundle_id: bundle_id.to_string(),
            from: self.id.clone(),
            reason: reason.to_string(),
        }
    }

    fn inbound(&mut self, msg: WireMessage) -> WireMessage {
        let WireMessage::Bundle { bundle, .. } = msg else {
            return self.nak("", "unexpected document");
        };
        let mut b = *bundle;
        let id = b.bundle_id.clone();
        let now = Self::now();
        let bab_ok = b
            .security
            .bab
            .as_ref()
            .is_some_and(|bab| bab.security_dest == self.id && bsp::bab_verify(&b, bab, &self.shared.key));
        if !bab_ok {
            return self.nak(&id, "BAB verification failed");
        }
        if b.is_expired(now) {
            return self.nak(&id, "expired");
        }
        let final_hop = b.destination.as_str() == self.id;
        let ack = if final_hop {
            WireMessage::DeliveryAck {
                bundle_id: id.clone(),
                from: self.id.clone(),
            }
        } else {
            WireMessage::CustodyAck {
                bundle_id: id.clone(),
                from: self.id.clone(),
            }
        };
        if self.seen.contains(&id) {
            return ack;
        }
        if final_hop {
            let intact = match &b.fragment {
                Some(_) => fragment::verify_fragment(&b, &self.shared.key).is_ok(),
                None => b.open(&self.shared.key).is_ok(),
            };
            if !intact {
                return self.nak(&id, "integrity check failed");
            }
        }
        let from = b.security.bab.as_ref().map(|x| x.security_source.clone()).unwrap_or_default();
        if b.push_hop(&self.id).is_err() {
            return self.nak(&id, "routing loop");
        }
        self.seen.insert(id.clone());
        self.shared.log(format!("recv,{id},{from},{}", self.id));
        if final_hop {
            self.deliver(b);
        } else if let Err(e) = self.queue.enqueue(b) {
            return self.nak(&id, &e.to_string());
        }
        ack
    }

    fn deliver(&mut self, mut b: DtnBundle) {
        let _ = b.transition(BundleStatus::Delivered);
        let key = &self.shared.key;
        let (parent, hops) = if b.fragment.is_some() {
            match fragment::accept_fragment(&mut self.reassembly, &b, key, Self::now()) {
                Ok(AcceptOutcome::Complete) => {
                    let pid = parent_of(&b);
                    let buf = self.reassembly.take(&pid).expect("complete buffer");
                    match fragment::reassemble(&buf, key) {
                        Ok((p, _)) => (p.bundle_id, b.hop_list.clone()),
                        Err(e) => {
                            self.recorder().set_status(&pid, BundleStatus::Failed);
                            self.shared.log(format!("reassembly_failed,{pid},{e}"));
                            return;
                        }
                    }
                }
                _ => return,
            }
        } else {
            (b.bundle_id.clone(), b.hop_list.clone())
        };
        let now = Self::now();
        let mut rec = self.recorder();
        if let Some(t) = rec.traces.get_mut(&parent) {
            if !t.status.is_terminal() {
                t.status = BundleStatus::Delivered;
                t.delivered_at = Some(now);
                t.latency_s = Some(time::seconds(now - t.created_at));
                t.hops = Some(hops.len().saturating_sub(1));
                t.route = hops.join(">");
            }
        }
        drop(rec);
        self.shared.log(format!("deliver,{parent},{}", self.id));
    }

    fn tick(&mut self) {
        let now = Self::now();
        for eff in self.custody.on_timeout(now) {
            self.apply(eff, true);
        }
        let expired = self.queue.expire(now);
        for b in expired {
            self.custody.mark_terminal(&b.bundle_id);
            self.recorder().set_status(&parent_of(&b), BundleStatus::Expired);
        }
        self.start_sends(now);
    }

    fn next_hop(&self, b: &DtnBundle, now: Timestamp) -> Option<String> {
        let topo = &self.shared.topology;
        let sched = &self.shared.schedule;
        let dst = b.destination.as_str();
        let avoid: BTreeSet<String> = b.hop_list.iter().cloned().collect();
        let r = if self.id == ISS {
            routing::route_from_iss(topo, dst, now, sched)
        } else if dst == ISS {
            routing::route_to_iss(topo, &self.id, now, sched, &avoid)
        } else {
            routing::bfs_path(topo, &self.id, dst, &avoid)
        };
        r.ok()?.hops.get(1).cloned()
    }

    fn start_sends(&mut self, now: Timestamp) {
        for id in self.queue.ids() {
            let Some(b) = self.queue.get(&id) else { continue };
            let Some(next) = self.next_hop(b, now) else { continue };
            if self.active.contains(&next) || !self.shared.links.is_up(&self.id, &next) {
                continue;
            }
            let Some(&addr) = self.shared.peers.get(&next) else { continue };
            let mut b = self.queue.remove(&id).expect("listed");
            if b.transition(BundleStatus::InTransit).is_err() {
                continue;
            }
            match bsp::bab_create(&b, &self.id, &next, &self.shared.key) {
                Ok(bab) => b.security.bab = Some(bab),
                Err(_) => continue,
            }
            self.custody.register_pending(&b, &self.id, &next, now);
            self.held.insert(id.clone(), b.clone());
            self.active.insert(next.clone());
            let loss = self.shared.links.get(&self.id, &next).map_or(0.0, |s| s.config.loss_prob);
            let delivery = if loss > 0.0 && self.rng.gen_bool(loss.min(1.0)) {
                Delivery::Drop
            } else {
                Delivery::Whole
            };
            {
                let mut rec = self.recorder();
                rec.counters.transmissions += 1;
                rec.set_status(&parent_of(&b), BundleStatus::InTransit);
            }
            self.shared.log(format!("send,{id},{},{next}", self.id));
            let (shared, tx, from) = (self.shared.clone(), self.tx.clone(), self.id.clone());
            thread::spawn(move || {
                let msg = WireMessage::bundle(b);
                let (report, reply) = shaped_send(addr, &shared.links, &from, &next, &msg, shared.io_timeout, delivery);
                let _ = tx.send(Event::SendDone {
                    peer: next,
                    bundle_id: id,
                    report,
                    reply,
                });
            });
        }
    }

    fn send_done(&mut self, peer: String, bundle_id: String, report: SendReport, reply: Option<WireMessage>) {
        self.active.remove(&peer);
        {
            let at_s = self.shared.started.elapsed().as_secs_f64();
            let mut rec = self.recorder();
            rec.sends.push(SendRecord {
                bundle_id: bundle_id.clone(),
                from: self.id.clone(),
                to: peer.clone(),
                at_s,
                report: report.clone(),
            });
        }
        let now = Self::now();
        let custody = self.held.get(&bundle_id).is_some_and(|b| b.custody);
        let ack_kind = match &reply {
            Some(WireMessage::CustodyAck { .. }) => Some(AckKind::CustodyAck),
            Some(WireMessage::DeliveryAck { .. }) => Some(AckKind::DeliveryAck),
            _ => None,
        };
        if let Some(kind) = ack_kind.filter(|_| report.ok) {
            {
                let mut rec = self.recorder();
                match kind {
                    AckKind::CustodyAck => rec.counters.custody_acks += u32::from(custody),
                    _ => rec.counters.delivery_acks += 1,
                }
            }
            self.held.remove(&bundle_id);
            let eff = self.custody.on_ack(&AckMessage {
                kind,
                bundle_id,
                from: peer,
                at: now,
            });
            self.apply(eff, false);
            return;
        }
        self.shared.log(format!(
            "send_failed,{bundle_id},{},{peer},{}",
            self.id,
            report.error.clone().unwrap_or_default()
        ));
        if !custody {
            if let Some(b) = self.held.remove(&bundle_id) {
                self.recorder().counters.retransmissions += 1;
                let _ = self.queue.enqueue(b);
            }
            return;
        }
        // an explicit NAK, or a failure while the link is still up, is
        // answered at once; a transfer cut by loss of contact waits for the
        // custody timeout
        let nak = matches!(reply, Some(WireMessage::CustodyNak { .. })) || self.shared.links.is_up(&self.id, &peer);
        if nak {
            self.recorder().counters.naks += 1;
            let eff = self.custody.on_ack(&AckMessage {
                kind: AckKind::CustodyNak,
                bundle_id,
                from: peer,
                at: now,
            });
            self.apply(eff, false);
        }
    }

    fn apply(&mut self, eff: CustodyEffect, from_timeout: bool) {
        match eff {
            CustodyEffect::Retransmit { bundle_id, attempt, .. } => {
                if let Some(b) = self.held.remove(&bundle_id) {
                    if self.queue.enqueue(b).is_ok() {
                        let mut rec = self.recorder();
                        rec.counters.retransmissions += 1;
                        if let Some(t) = rec.traces.get_mut(parent_of_id(&bundle_id)) {
                            t.retransmissions += 1;
                        }
                    }
                    let why = if from_timeout { "timeout" } else { "nak" };
                    self.shared
                        .log(format!("retransmit,{bundle_id},{},{why} attempt {attempt}", self.id));
                }
            }
            CustodyEffect::Failed { bundle_id, .. } => {
                self.held.remove(&bundle_id);
                self.recorder().set_status(parent_of_id(&bundle_id), BundleStatus::Failed);
                self.shared.log(format!("failed,{bundle_id},{}", self.id));
            }
            CustodyEffect::Released { bundle_id, .. } | CustodyEffect::Delivered { bundle_id, .. } => {
                self.held.remove(&bundle_id);
            }
            CustodyEffect::Ignored { .. } => {}
        }
    }
}
