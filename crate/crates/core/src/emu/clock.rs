use serde::{Deserialize, Serialize};

use crate::routing::PassOracle;
use crate::time::{self, Timestamp};

/// Every station up for `up_s`, then down for `down_s`, repeating from
/// `epoch`. All stations share the same phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalSchedule {
    #[serde(with = "time::iso_ms")]
    pub epoch: Timestamp,
    pub up_s: f64,
    pub down_s: f64,
    pub always_up: bool,
}

impl GlobalSchedule {
    /// Schedule whose phase at `start` is `phase_s` seconds into a cycle.
    pub fn new(start: Timestamp, up_s: f64, down_s: f64, phase_s: f64) -> Self {
        Self {
            epoch: start - time::from_seconds(phase_s),
            up_s,
            down_s,
            always_up: false,
        }
    }

    pub fn always_up(start: Timestamp) -> Self {
        Self {
            epoch: start,
            up_s: 1.0,
            down_s: 0.0,
            always_up: true,
        }
    }

    fn phase(&self, t: Timestamp) -> f64 {
        time::seconds(t - self.epoch).rem_euclid(self.up_s + self.down_s)
    }

    pub fn is_up(&self, t: Timestamp) -> bool {
        self.always_up || self.phase(t) < self.up_s
    }

    /// Seconds until the up/down state next flips; `None` when always up.
    pub fn until_change(&self, t: Timestamp) -> Option<f64> {
        if self.always_up {
            return None;
        }
        let p = self.phase(t);
        Some(if p < self.up_s { self.up_s - p } else { self.up_s + self.down_s - p })
    }
}

impl PassOracle for GlobalSchedule {
    fn is_visible(&self, _station: &str, t: Timestamp) -> bool {
        self.is_up(t)
    }

    fn next_aos(&self, _station: &str, t: Timestamp) -> Option<Timestamp> {
        if self.always_up {
            return None;
        }
        let period = self.up_s + self.down_s;
        Some(t + time::from_seconds(period - self.phase(t)))
    }
}
