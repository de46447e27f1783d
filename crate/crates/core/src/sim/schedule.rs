use std::collections::BTreeMap;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::orbital::{predict_passes, ContactWindow, Propagator, PropagatorSpec, Roster};
use crate::routing::PassOracle;
use crate::time::{self, Timestamp};

use super::SimError;

/// How per-station offsets of the synthetic schedule are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stagger {
    /// Offset proportional to station longitude, following the eastward
    /// progression of the ground track: `(lon + 180) / 360 * period`.
    #[default]
    Longitude,
    /// Station k of N (roster order) at `k * period / N`.
    Uniform,
    Explicit { offsets: BTreeMap<String, f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScheduleSpec {
    Synthetic {
        #[serde(default = "default_period")]
        period_s: f64,
        #[serde(default = "default_window")]
        window_s: f64,
        #[serde(default)]
        stagger: Stagger,
    },
    Orbital {
        #[serde(default)]
        propagator: PropagatorSpec,
        #[serde(default)]
        threshold_deg: f64,
    },
    AlwaysUp,
}

fn default_period() -> f64 {
    5520.0
}

fn default_window() -> f64 {
    480.0
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Synthetic {
            period_s: default_period(),
            window_s: default_window(),
            stagger: Stagger::default(),
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Synthetic {
        period: f64,
        window: f64,
        offsets: BTreeMap<String, f64>,
    },
    Orbital {
        propagator: Propagator,
        windows: BTreeMap<String, Vec<ContactWindow>>,
    },
    AlwaysUp,
}

/// Station to ISS visibility over a run. Answers are pure functions of time.
#[derive(Debug, Clone)]
pub struct ContactSchedule {
    kind: Kind,
    start: Timestamp,
    end: Timestamp,
}

impl ContactSchedule {
    /// Builds the schedule for `[start, start + horizon]`; orbital windows are
    /// predicted up front for that span.
    pub fn build(
        spec: &ScheduleSpec,
        roster: &Roster,
        start: Timestamp,
        horizon: Duration,
    ) -> Result<Self, SimError> {
        let end = start + horizon;
        let kind = match spec {
            ScheduleSpec::Synthetic {
                period_s,
                window_s,
                stagger,
            } => {
                if !(*window_s > 0.0 && window_s < period_s) {
                    return Err(SimError::Config(format!(
                        "synthetic schedule needs 0 < window_s < period_s, got {window_s} / {period_s}"
                    )));
                }
                let n = roster.len().max(1) as f64;
                let mut offsets = BTreeMap::new();
                for (k, s) in roster.iter().enumerate() {
                    let off = match stagger {
                        Stagger::Longitude => (s.lon + 180.0) / 360.0 * period_s,
                        Stagger::Uniform => k as f64 * period_s / n,
                        Stagger::Explicit { offsets } => *offsets.get(&s.id).ok_or_else(|| {
                            SimError::Config(format!("no stagger offset for station {}", s.id))
                        })?,
                    };
                    offsets.insert(s.id.clone(), off.rem_euclid(*period_s));
                }
                Kind::Synthetic {
                    period: *period_s,
                    window: *window_s,
                    offsets,
                }
            }
            ScheduleSpec::Orbital {
                propagator,
                threshold_deg,
            } => {
                let propagator = Propagator::from_spec(propagator)?;
                let mut windows = BTreeMap::new();
                for s in roster.iter() {
                    windows.insert(
                        s.id.clone(),
                        predict_passes(&propagator, s, start, horizon, *threshold_deg)?,
                    );
                }
                Kind::Orbital {
                    propagator,
                    windows,
                }
            }
            ScheduleSpec::AlwaysUp => Kind::AlwaysUp,
        };
        Ok(Self { kind, start, end })
    }

    pub fn propagator(&self) -> Option<&Propagator> {
        match &self.kind {
            Kind::Orbital { propagator, .. } => Some(propagator),
            _ => None,
        }
    }

    pub fn offsets(&self) -> Option<&BTreeMap<String, f64>> {
        match &self.kind {
            Kind::Synthetic { offsets, .. } => Some(offsets),
            _ => None,
        }
    }

    /// Position of `t` in the station's cycle. Values within a microsecond of
    /// the period snap to 0 so an aos computed by `next_aos` lies in its window.
    fn phase(&self, t: Timestamp, offset: f64, period: f64) -> f64 {
        let p = (time::seconds(t - self.start) - offset).rem_euclid(period);
        if period - p < 1e-6 {
            0.0
        } else {
            p
        }
    }

    /// The window containing `t`, if the station is in contact.
    pub fn window_at(&self, station: &str, t: Timestamp) -> Option<(Timestamp, Timestamp)> {
        match &self.kind {
            Kind::AlwaysUp => Some((self.start, self.end)),
            Kind::Synthetic {
                period,
                window,
                offsets,
            } => {
                let off = *offsets.get(station)?;
                let phase = self.phase(t, off, *period);
                (phase < *window).then(|| {
                    let aos = t - time::from_seconds(phase);
                    (aos, aos + time::from_seconds(*window))
                })
            }
            Kind::Orbital { windows, .. } => windows
                .get(station)?
                .iter()
                .find(|w| w.contains(t))
                .map(|w| (w.aos, w.los)),
        }
    }

    /// Windows for `station` that overlap `[from, to]`.
    pub fn windows_between(&self, station: &str, from: Timestamp, to: Timestamp) -> Vec<(Timestamp, Timestamp)> {
        let mut out = Vec::new();
        let mut t = from;
        if let Some(w) = self.window_at(station, t) {
            out.push(w);
            t = w.1;
        }
        while let Some(aos) = self.next_aos(station, t) {
            if aos > to {
                break;
            }
            let w = self.window_at(station, aos).expect("window starts at aos");
            out.push(w);
            t = w.1;
        }
        out
    }
}

impl PassOracle for ContactSchedule {
    fn is_visible(&self, station: &str, t: Timestamp) -> bool {
        self.window_at(station, t).is_some()
    }

    fn next_aos(&self, station: &str, t: Timestamp) -> Option<Timestamp> {
        match &self.kind {
            Kind::AlwaysUp => None,
            Kind::Synthetic {
                period, offsets, ..
            } => {
                let off = *offsets.get(station)?;
                let phase = self.phase(t, off, *period);
                let aos = t + time::from_seconds(period - phase);
                (aos <= self.end).then_some(aos)
            }
            Kind::Orbital { windows, .. } => windows
                .get(station)?
                .iter()
                .find(|w| w.aos > t)
                .map(|w| w.aos),
        }
    }
}
