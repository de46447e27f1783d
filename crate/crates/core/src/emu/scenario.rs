use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use chrono::Utc;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bsp;
use crate::bundle::ISS;
use crate::custody::CustodyConfig;
use crate::fragment::{FragmentConfig, DEFAULT_HEADER_RESERVE, DEFAULT_MTU};
use crate::orbital::{default_roster, Roster};
use crate::routing::MeshTopology;
use crate::sim::{expand_injections, Injection, KeySpec, MetricsRecord, Submission, Sweep, Traffic};
use crate::time;

use super::clock::GlobalSchedule;
use super::node::{bind, NodeHandle, Recorder, SendRecord, Shared, Event};
use super::shaping::{shaped_send, Delivery, LinkTable, ShapedLinkConfig};
use super::wire::WireMessage;
use super::EmuError;

const CONTROL_TICK: Duration = Duration::from_millis(10);
const POLL: Duration = Duration::from_millis(20);

/// Single-attempt transfers that bypass the DTN layer entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSpec {
    pub source: String,
    #[serde(default = "iss")]
    pub destination: String,
    pub size: usize,
    /// Attempt times in seconds from the start of the run.
    pub at_s: Vec<f64>,
}

fn iss() -> String {
    ISS.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAttempt {
    pub at_s: f64,
    pub link_up: bool,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmuSpec {
    pub name: String,
    pub seed: u64,
    pub up_s: f64,
    pub down_s: f64,
    /// Seconds into the up/down cycle at which the run starts.
    pub phase_s: f64,
    pub always_up: bool,
    /// Loss probability applied to every ISS link.
    pub loss: f64,
    /// Wall-clock budget; the run stops early once every bundle settles.
    pub duration_s: f64,
    pub iss_link: ShapedLinkConfig,
    pub ground_link: ShapedLinkConfig,
    pub io_timeout_s: f64,
    /// First listening port (ISS, then stations in roster order); 0 picks
    /// ephemeral ports.
    pub base_port: u16,
    /// Roster subset to start; all default stations when absent.
    pub stations: Option<Vec<String>>,
    pub topology: Option<MeshTopology>,
    pub keys: KeySpec,
    pub custody: CustodyConfig,
    pub mtu: usize,
    pub header_reserve: usize,
    pub traffic: Option<Traffic>,
    pub injections: Vec<Injection>,
    pub raw: Option<RawSpec>,
    pub sweep: Sweep,
}

impl Default for EmuSpec {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            seed: 1,
            up_s: 120.0,
            down_s: 180.0,
            phase_s: 0.0,
            always_up: false,
            loss: 0.0,
            duration_s: 600.0,
            iss_link: ShapedLinkConfig::iss(),
            ground_link: ShapedLinkConfig::ground(),
            io_timeout_s: 2.0,
            base_port: 15_000,
            stations: None,
            topology: None,
            keys: KeySpec::default(),
            custody: CustodyConfig::default(),
            mtu: DEFAULT_MTU,
            header_reserve: DEFAULT_HEADER_RESERVE,
            traffic: None,
            injections: Vec::new(),
            raw: None,
            sweep: Sweep::default(),
        }
    }
}

const PROFILES: [(&str, &str); 3] = [
    ("E3", include_str!("../../profiles/e3.toml")),
    ("E7", include_str!("../../profiles/e7.toml")),
    ("E8", include_str!("../../profiles/e8.toml")),
];

pub fn emu_profile_names() -> impl Iterator<Item = &'static str> {
    PROFILES.iter().map(|(n, _)| *n)
}

impl EmuSpec {
    pub fn from_toml(text: &str) -> Result<Self, EmuError> {
        toml::from_str(text).map_err(|e| EmuError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmuError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| EmuError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn profile(name: &str) -> Result<Self, EmuError> {
        PROFILES
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| EmuError::Config(format!("unknown emulation profile {name}")))
            .and_then(|(_, s)| Self::from_toml(s))
    }

    pub fn roster(&self) -> Result<Roster, EmuError> {
        let all = default_roster();
        let Some(ids) = &self.stations else { return Ok(all) };
        let picked = ids
            .iter()
            .map(|id| {
                all.get(id)
                    .cloned()
                    .ok_or_else(|| EmuError::Config(format!("unknown station {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Roster::new(picked).map_err(|e| EmuError::Config(e.to_string()))
    }

    pub fn mesh(&self, roster: &Roster) -> Result<MeshTopology, EmuError> {
        let mesh = match &self.topology {
            Some(t) => t.clone(),
            None => MeshTopology::default_for(roster),
        };
        if let Some(s) = mesh.stations().find(|s| roster.get(s).is_none()) {
            return Err(EmuError::Config(format!("topology node {s} is not running")));
        }
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<(), EmuError> {
        if !self.always_up && !(self.up_s > 0.0 && self.down_s >= 0.0) {
            return Err(EmuError::Config("up_s must be positive and down_s non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.loss) {
            return Err(EmuError::Config(format!("loss {} outside [0, 1]", self.loss)));
        }
        if !(self.duration_s > 0.0 && self.io_timeout_s > 0.0) {
            return Err(EmuError::Config("duration_s and io_timeout_s must be positive".into()));
        }
        self.iss_link.validate()?;
        self.ground_link.validate()?;
        FragmentConfig {
            mtu: self.mtu,
            header_reserve: self.header_reserve,
        }
        .chunk_size()?;
        self.keys.key_config().validate()?;
        if let Some(r) = &self.raw {
            if r.size == 0 || r.at_s.iter().any(|t| !(*t >= 0.0 && *t <= self.duration_s)) {
                return Err(EmuError::Config("raw attempts need a size and times inside the run".into()));
            }
        }
        Ok(())
    }

    /// Copies of this spec for each loss level (or itself when no sweep).
    pub fn levels(&self) -> Vec<(String, EmuSpec)> {
        let mut out: Vec<(String, EmuSpec)> = self
            .sweep
            .losses
            .iter()
            .map(|&loss| {
                let pct = (loss * 100.0).round();
                (
                    format!("loss={pct}%"),
                    EmuSpec {
                        loss,
                        name: format!("{}-loss{pct}", self.name),
                        ..self.clone()
                    },
                )
            })
            .collect();
        if out.is_empty() {
            out.push((String::new(), self.clone()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmuReport {
    pub name: String,
    pub loss: f64,
    pub metrics: MetricsRecord,
    pub sends: Vec<SendRecord>,
    pub sends_total: usize,
    pub sends_ok: usize,
    pub mean_rtt_ms: Option<f64>,
    /// Failed sends over all sends.
    pub observed_loss: f64,
    pub raw: Vec<RawAttempt>,
    pub wall_time_s: f64,
    /// Every bundle settled before the wall-clock budget ran out.
    pub completed: bool,
    pub events: Vec<String>,
}

impl EmuReport {
    pub fn raw_delivered(&self) -> usize {
        self.raw.iter().filter(|r| r.ok).count()
    }
}

pub fn run_emulation_sweep(spec: &EmuSpec) -> Result<Vec<EmuReport>, EmuError> {
    spec.levels().iter().map(|(_, s)| run_emulation(s)).collect()
}

/// Starts one node per station plus the ISS, drives link state from the
/// contact schedule, injects the scripted traffic at its wall-clock offsets
/// and waits for every bundle to settle.
pub fn run_emulation(spec: &EmuSpec) -> Result<EmuReport, EmuError> {
    spec.validate()?;
    let roster = spec.roster()?;
    let mesh = spec.mesh(&roster)?;
    let injections = expand_injections(&spec.injections, spec.traffic.as_ref(), &roster, spec.duration_s)?;
    for inj in &injections {
        if roster.get(&inj.source).is_none() {
            return Err(EmuError::Config(format!("source {} is not running", inj.source)));
        }
        if inj.destination.as_str() == crate::bundle::BROADCAST {
            return Err(EmuError::Config("broadcast is not supported in emulation".into()));
        }
    }
    let key = bsp::derive_key(&spec.keys.key_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let payloads: Vec<Vec<u8>> = injections
        .iter()
        .map(|inj| match (&inj.message, inj.size) {
            (Some(m), _) => m.as_bytes().to_vec(),
            (_, n) => {
                let mut buf = vec![0u8; n.unwrap_or(0)];
                rng.fill_bytes(&mut buf);
                buf
            }
        })
        .collect();

    let nodes: Vec<String> = std::iter::once(ISS.to_string())
        .chain(roster.ids().map(str::to_string))
        .collect();
    let mut listeners = Vec::new();
    let mut peers = BTreeMap::new();
    for (i, id) in nodes.iter().enumerate() {
        let port = if spec.base_port == 0 { 0 } else { spec.base_port + i as u16 };
        let l = bind(id, port)?;
        peers.insert(id.clone(), l.local_addr()?);
        listeners.push(l);
    }

    let start = time::truncate_ms(Utc::now());
    let schedule = if spec.always_up {
        GlobalSchedule::always_up(start)
    } else {
        GlobalSchedule::new(start, spec.up_s, spec.down_s, spec.phase_s)
    };
    let links = LinkTable::new();
    let up = schedule.is_up(start);
    for s in roster.ids() {
        links.set(
            ISS,
            s,
            ShapedLinkConfig {
                loss_prob: spec.loss,
                ..spec.iss_link
            },
            up,
        );
    }
    for a in mesh.stations() {
        for b in mesh.neighbors(a) {
            links.set(a, b, spec.ground_link, true);
        }
    }

    let recorder = Arc::new(Mutex::new(Recorder::default()));
    let started = Instant::now();
    let shared = Arc::new(Shared {
        key,
        topology: mesh,
        schedule,
        links: links.clone(),
        peers: peers.clone(),
        fragment: FragmentConfig {
            mtu: spec.mtu,
            header_reserve: spec.header_reserve,
        },
        custody: spec.custody,
        io_timeout: Duration::from_secs_f64(spec.io_timeout_s),
        started,
        recorder: recorder.clone(),
    });

    let stop = Arc::new(AtomicBool::new(false));
    let controller = {
        let (stop, links, loss) = (stop.clone(), links.clone(), spec.loss);
        let stations: Vec<String> = roster.ids().map(str::to_string).collect();
        thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                let visible = schedule.is_up(Utc::now());
                for s in &stations {
                    links.apply_link_state(ISS, s, visible, loss);
                }
                thread::sleep(CONTROL_TICK);
            }
        })
    };

    let mut handles = Vec::new();
    for (i, (id, l)) in nodes.iter().zip(listeners).enumerate() {
        let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
        handles.push(NodeHandle::spawn(id, l, shared.clone(), seed)?);
    }
    let senders: BTreeMap<String, _> = handles.iter().map(|h| (h.id.clone(), h.tx.clone())).collect();

    let raw_thread = spec.raw.clone().map(|raw| {
        let (links, peers, io_timeout) = (links.clone(), peers.clone(), shared.io_timeout);
        let payload = {
            let mut buf = vec![0u8; raw.size];
            rng.fill_bytes(&mut buf);
            buf
        };
        thread::spawn(move || {
            let mut out = Vec::new();
            for &at in &raw.at_s {
                sleep_until(started, at);
                let link_up = links.is_up(&raw.source, &raw.destination);
                let msg = WireMessage::raw(&payload);
                let (report, _) = match peers.get(&raw.destination) {
                    Some(&addr) => shaped_send(addr, &links, &raw.source, &raw.destination, &msg, io_timeout, Delivery::Whole),
                    None => continue,
                };
                out.push(RawAttempt {
                    at_s: at,
                    link_up,
                    ok: report.ok,
                    error: report.error,
                });
            }
            out
        })
    });

    for (inj, plaintext) in injections.iter().zip(payloads) {
        sleep_until(started, inj.at_s);
        let _ = senders[&inj.source].send(Event::Inject(Submission {
            source: inj.source.clone(),
            destination: inj.destination.clone(),
            plaintext,
            priority: inj.priority,
            custody: inj.custody,
            ttl_s: inj.ttl_s,
        }));
    }
    let settled = || {
        let rec = recorder.lock().expect("recorder lock");
        rec.traces.len() == injections.len() && rec.traces.values().all(|t| t.status.is_terminal())
    };
    let budget = Duration::from_secs_f64(spec.duration_s);
    while !settled() && started.elapsed() < budget {
        thread::sleep(POLL);
    }
    let completed = settled();
    let raw = raw_thread.map(|t| t.join().unwrap_or_default()).unwrap_or_default();
    let wall_time_s = started.elapsed().as_secs_f64();

    for h in handles {
        h.shutdown();
    }
    stop.store(true, Ordering::Relaxed);
    let _ = controller.join();

    let rec = std::mem::take(&mut *recorder.lock().expect("recorder lock"));
    let traces: Vec<_> = rec.traces.into_values().collect();
    let metrics = MetricsRecord::from_traces(&spec.name, spec.seed, traces, rec.counters, wall_time_s);
    let sends_total = rec.sends.len();
    let sends_ok = rec.sends.iter().filter(|s| s.report.ok).count();
    let rtts: Vec<f64> = rec.sends.iter().filter_map(|s| s.report.socket_rtt_ms).collect();
    Ok(EmuReport {
        name: spec.name.clone(),
        loss: spec.loss,
        metrics,
        sends_total,
        sends_ok,
        mean_rtt_ms: (!rtts.is_empty()).then(|| rtts.iter().sum::<f64>() / rtts.len() as f64),
        observed_loss: if sends_total == 0 {
            0.0
        } else {
            (sends_total - sends_ok) as f64 / sends_total as f64
        },
        sends: rec.sends,
        raw,
        wall_time_s,
        completed,
        events: rec.events,
    })
}

fn sleep_until(started: Instant, at_s: f64) {
    let target = started + Duration::from_secs_f64(at_s);
    let now = Instant::now();
    if target > now {
        thread::sleep(target - now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_parse() {
        for n in emu_profile_names() {
            EmuSpec::profile(n).unwrap().validate().unwrap();
        }
        assert_eq!(EmuSpec::profile("E3").unwrap().levels().len(), 5);
    }

    #[test]
    fn always_up_small_run() {
        let spec = EmuSpec {
            name: "t".into(),
            always_up: true,
            base_port: 0,
            duration_s: 20.0,
            stations: Some(vec!["toronto".into(), "london".into()]),
            keys: KeySpec {
                kdf_iterations: 1000,
                ..KeySpec::default()
            },
            traffic: Some(Traffic {
                count: 3,
                size: 200,
                start_s: 0.0,
                spread_s: 0.3,
                sources: vec!["toronto".into(), "london".into()],
                destination: ISS.into(),
                priority: Default::default(),
                custody: true,
                ttl_s: 600,
            }),
            ..EmuSpec::default()
        };
        let r = run_emulation(&spec).unwrap();
        assert!(r.completed);
        assert_eq!(r.metrics.delivered, 3);
        assert!(r.sends_total >= 3);
        assert_eq!(r.metrics.mean_hops, Some(1.0));
    }

    #[test]
    fn broadcast_rejected() {
        let spec = EmuSpec {
            injections: vec![Injection {
                at_s: 0.0,
                source: "toronto".into(),
                destination: crate::bundle::BROADCAST.into(),
                size: Some(10),
                message: None,
                priority: Default::default(),
                custody: false,
                ttl_s: 60,
            }],
            ..EmuSpec::default()
        };
        assert!(matches!(run_emulation(&spec), Err(EmuError::Config(_))));
    }
}
