use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsp::{KeyConfig, DEFAULT_KDF_ITERATIONS, DEFAULT_SALT};
use crate::bundle::{Priority, DEFAULT_TTL_S, ISS};
use crate::custody::CustodyConfig;
use crate::fragment::{DEFAULT_HEADER_RESERVE, DEFAULT_MTU};
use crate::linkbudget::RfConfig;
use crate::orbital::{default_roster, GroundStation, Roster};
use crate::routing::{MeshTopology, DEFAULT_HORIZON_S};
use crate::time::{self, Timestamp};

use super::schedule::ScheduleSpec;
use super::SimError;

pub const DEFAULT_SECRET: &str = "dtnsim-shared-secret";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeySpec {
    pub secret: String,
    pub salt: String,
    pub kdf_iterations: u32,
}

impl Default for KeySpec {
    fn default() -> Self {
        Self {
            secret: DEFAULT_SECRET.into(),
            salt: String::from_utf8(DEFAULT_SALT.to_vec()).expect("ascii salt"),
            kdf_iterations: DEFAULT_KDF_ITERATIONS,
        }
    }
}

impl KeySpec {
    pub fn key_config(&self) -> KeyConfig {
        KeyConfig {
            shared_secret: self.secret.as_bytes().to_vec(),
            salt: self.salt.as_bytes().to_vec(),
            kdf_iterations: self.kdf_iterations,
        }
    }
}

fn default_destination() -> String {
    ISS.into()
}

fn yes() -> bool {
    true
}

fn default_ttl() -> u64 {
    DEFAULT_TTL_S
}

/// One scripted bundle. Either `message` (UTF-8 text) or `size` (random
/// bytes from the scenario RNG) supplies the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub at_s: f64,
    pub source: String,
    #[serde(default = "default_destination")]
    pub destination: String,
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub priority: Priority,
    #[serde(default = "yes")]
    pub custody: bool,
    #[serde(default = "default_ttl")]
    pub ttl_s: u64,
}

/// `count` equal-size bundles spread evenly over `spread_s`, with sources
/// rotating through `sources` (the roster when empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Traffic {
    pub count: usize,
    pub size: usize,
    #[serde(default)]
    pub start_s: f64,
    pub spread_s: f64,
    #[serde(default)]
    pub sources: Vec<String>,
    #[serde(default = "default_destination")]
    pub destination: String,
    #[serde(default)]
    pub priority: Priority,
    #[serde(default = "yes")]
    pub custody: bool,
    #[serde(default = "default_ttl")]
    pub ttl_s: u64,
}

/// Parameter levels an experiment runs the scenario at.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweep {
    pub sizes: Vec<usize>,
    pub counts: Vec<usize>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    #[serde(with = "time::iso_ms")]
    pub start: Timestamp,
    /// Upper bound on virtual run time; runs stop earlier once every bundle
    /// reaches a terminal state.
    pub duration_s: f64,
    pub tick_s: f64,
    pub schedule: ScheduleSpec,
    /// Fixed ISS link rate; when absent the rate comes from the link budget,
    /// which needs an orbital schedule.
    pub iss_rate_bps: Option<f64>,
    pub rf: RfConfig,
    pub ground_rate_bps: f64,
    pub mtu: usize,
    pub header_reserve: usize,
    pub custody: CustodyConfig,
    pub keys: KeySpec,
    pub stations: Option<Vec<GroundStation>>,
    pub topology: Option<MeshTopology>,
    pub routing_horizon_s: f64,
    pub injections: Vec<Injection>,
    pub traffic: Option<Traffic>,
    pub sweep: Sweep,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            seed: 1,
            start: time::sim_epoch(),
            duration_s: 4.0 * 5520.0,
            tick_s: 0.1,
            schedule: ScheduleSpec::default(),
            iss_rate_bps: Some(56_000.0),
            rf: RfConfig::default(),
            ground_rate_bps: 100e6,
            mtu: DEFAULT_MTU,
            header_reserve: DEFAULT_HEADER_RESERVE,
            custody: CustodyConfig::default(),
            keys: KeySpec::default(),
            stations: None,
            topology: None,
            routing_horizon_s: DEFAULT_HORIZON_S,
            injections: Vec::new(),
            traffic: None,
            sweep: Sweep::default(),
        }
    }
}

/// `injections` plus the bundles `traffic` generates, checked against
/// `duration_s` and sorted by time.
pub fn expand_injections(
    injections: &[Injection],
    traffic: Option<&Traffic>,
    roster: &Roster,
    duration_s: f64,
) -> Result<Vec<Injection>, SimError> {
    let mut out = injections.to_vec();
    if let Some(t) = traffic {
        let sources: Vec<String> = if t.sources.is_empty() {
            roster.ids().map(str::to_string).collect()
        } else {
            t.sources.clone()
        };
        if sources.is_empty() {
            return Err(SimError::Config("traffic has no sources".into()));
        }
        for k in 0..t.count {
            out.push(Injection {
                at_s: t.start_s + k as f64 * t.spread_s / t.count as f64,
                source: sources[k % sources.len()].clone(),
                destination: t.destination.clone(),
                size: Some(t.size),
                message: None,
                priority: t.priority,
                custody: t.custody,
                ttl_s: t.ttl_s,
            });
        }
    }
    for inj in &out {
        if !(inj.at_s >= 0.0 && inj.at_s <= duration_s) {
            return Err(SimError::Config(format!(
                "injection at {} s is outside the run duration {duration_s} s",
                inj.at_s
            )));
        }
        if inj.size.is_none() && inj.message.is_none() {
            return Err(SimError::Config("injection needs a size or a message".into()));
        }
    }
    out.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
    Ok(out)
}

const PROFILES: [(&str, &str); 3] = [
    ("E1", include_str!("../../profiles/e1.toml")),
    ("E4", include_str!("../../profiles/e4.toml")),
    ("E5", include_str!("../../profiles/e5.toml")),
];

pub fn profile_names() -> impl Iterator<Item = &'static str> {
    PROFILES.iter().map(|(n, _)| *n)
}

/// Raw TOML of a built-in profile.
pub fn profile_source(name: &str) -> Option<&'static str> {
    PROFILES
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, s)| *s)
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| SimError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn profile(name: &str) -> Result<Self, SimError> {
        let src = profile_source(name).ok_or_else(|| SimError::Config(format!("unknown profile {name}")))?;
        Self::from_toml(src)
    }

    pub fn roster(&self) -> Result<Roster, SimError> {
        match &self.stations {
            Some(s) => Ok(Roster::new(s.clone())?),
            None => Ok(default_roster()),
        }
    }

    pub fn mesh(&self, roster: &Roster) -> Result<MeshTopology, SimError> {
        let mesh = match &self.topology {
            Some(t) => t.clone(),
            None => MeshTopology::default_for(roster),
        };
        for s in mesh.stations() {
            if roster.get(s).is_none() {
                return Err(SimError::Config(format!("topology node {s} is not in the roster")));
            }
        }
        Ok(mesh)
    }

    /// Scripted injections plus those generated by `traffic`, sorted by time
    /// (stable, so scripted order breaks ties).
    pub fn all_injections(&self, roster: &Roster) -> Result<Vec<Injection>, SimError> {
        expand_injections(&self.injections, self.traffic.as_ref(), roster, self.duration_s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.tick_s > 0.0) || !(self.duration_s > 0.0) {
            return Err(SimError::Config("tick_s and duration_s must be positive".into()));
        }
        if let Some(r) = self.iss_rate_bps {
            if !(r > 0.0) {
                return Err(SimError::Config("iss_rate_bps must be positive".into()));
            }
        } else if !matches!(self.schedule, ScheduleSpec::Orbital { .. }) {
            return Err(SimError::Config(
                "iss_rate_bps is required unless the schedule is ORBITAL".into(),
            ));
        }
        if !(self.ground_rate_bps > 0.0) {
            return Err(SimError::Config("ground_rate_bps must be positive".into()));
        }
        if self.mtu <= self.header_reserve {
            return Err(SimError::Config(format!(
                "mtu {} must exceed header_reserve {}",
                self.mtu, self.header_reserve
            )));
        }
        self.rf.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.keys.key_config().validate()?;
        Ok(())
    }

    /// Copies of this spec for each sweep level (or itself when no sweep).
    pub fn levels(&self) -> Vec<(String, ScenarioSpec)> {
        let mut out = Vec::new();
        for &size in &self.sweep.sizes {
            let mut s = self.clone();
            if let Some(t) = s.traffic.as_mut() {
                t.size = size;
            }
            s.name = format!("{}-size{size}", self.name);
            out.push((format!("size={size}"), s));
        }
        for &count in &self.sweep.counts {
            let mut s = self.clone();
            if let Some(t) = s.traffic.as_mut() {
                t.count = count;
            }
            s.name = format!("{}-count{count}", self.name);
            out.push((format!("count={count}"), s));
        }
        if out.is_empty() {
            out.push((String::new(), self.clone()));
        }
        out
    }
}
