use chrono::Duration;
use serde::{Deserialize, Serialize};

use super::{look_angles, step, GeodeticPosition, GroundStation, OrbitalError, Propagator};
use crate::time::{self, Timestamp};

/// Coarse scan interval before bisection refinement.
pub const COARSE_STEP_S: f64 = 60.0;
const REFINE_S: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactWindow {
    pub station_id: String,
    #[serde(with = "time::iso_ms")]
    pub aos: Timestamp,
    #[serde(with = "time::iso_ms")]
    pub los: Timestamp,
    pub max_elevation: f64,
    #[serde(with = "time::iso_ms")]
    pub max_elevation_at: Timestamp,
}

impl ContactWindow {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.aos <= t && t < self.los
    }

    pub fn duration(&self) -> Duration {
        self.los - self.aos
    }
}

/// Visibility uses `>=`: an elevation exactly at the threshold counts.
pub fn is_visible(station: &GroundStation, iss: &GeodeticPosition, threshold_deg: f64) -> bool {
    look_angles(station, iss).elevation >= threshold_deg
}

struct Scanner<'a> {
    propagator: &'a Propagator,
    station: &'a GroundStation,
    threshold: f64,
}

impl Scanner<'_> {
    fn elevation(&self, t: Timestamp) -> Result<f64, OrbitalError> {
        Ok(look_angles(self.station, &self.propagator.propagate(t)?).elevation)
    }

    fn above(&self, t: Timestamp) -> Result<bool, OrbitalError> {
        Ok(self.elevation(t)? >= self.threshold)
    }

    /// Narrows a visibility transition inside `[lo, hi]`. Returns the first
    /// instant (within tolerance) with the same visibility as `hi`.
    fn bisect(&self, mut lo: Timestamp, mut hi: Timestamp) -> Result<Timestamp, OrbitalError> {
        let lo_state = self.above(lo)?;
        while time::seconds(hi - lo) > REFINE_S {
            let mid = lo + (hi - lo) / 2;
            if self.above(mid)? == lo_state {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }

    /// Golden-section search for the elevation peak on `[a, b]`.
    fn peak(&self, a: Timestamp, b: Timestamp) -> Result<(Timestamp, f64), OrbitalError> {
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let mut lo = 0.0;
        let mut hi = time::seconds(b - a);
        let at = |s: f64| step(a, s);
        let mut x1 = hi - ratio * (hi - lo);
        let mut x2 = lo + ratio * (hi - lo);
        let mut f1 = self.elevation(at(x1))?;
        let mut f2 = self.elevation(at(x2))?;
        while hi - lo > 0.05 {
            if f1 < f2 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + ratio * (hi - lo);
                f2 = self.elevation(at(x2))?;
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - ratio * (hi - lo);
                f1 = self.elevation(at(x1))?;
            }
        }
        let mid = (lo + hi) / 2.0;
        Ok((at(mid), self.elevation(at(mid))?))
    }

    fn window(&self, aos: Timestamp, los: Timestamp) -> Result<Option<ContactWindow>, OrbitalError> {
        if los <= aos {
            return Ok(None);
        }
        let (mut peak_at, mut peak) = self.peak(aos, los)?;
        for edge in [aos, los] {
            let el = self.elevation(edge)?;
            if el > peak {
                peak = el;
                peak_at = edge;
            }
        }
        Ok(Some(ContactWindow {
            station_id: self.station.id.clone(),
            aos,
            los,
            max_elevation: peak,
            max_elevation_at: peak_at,
        }))
    }
}

/// Predicts contact windows over `[t0, t0 + horizon]`.
///
/// Elevation is sampled every [`COARSE_STEP_S`] and each AOS/LOS edge is
/// bisected to well under a second. Passes already in progress at `t0` start
/// at `t0`; passes still open at the horizon end there. A local elevation
/// maximum between two below-threshold samples is also searched, so short
/// grazing passes are not lost between coarse samples.
pub fn predict_passes(
    propagator: &Propagator,
    station: &GroundStation,
    t0: Timestamp,
    horizon: Duration,
    threshold_deg: f64,
) -> Result<Vec<ContactWindow>, OrbitalError> {
    if horizon <= Duration::zero() {
        return Err(OrbitalError::InvalidParameters("horizon must be positive".into()));
    }
    let scan = Scanner {
        propagator,
        station,
        threshold: threshold_deg,
    };
    let end = t0 + horizon;
    let mut windows = Vec::new();
    let mut aos: Option<Timestamp> = None;
    let mut history: Vec<(Timestamp, f64)> = Vec::with_capacity(3);
    let mut k = 0i64;

    loop {
        let mut t = step(t0, k as f64 * COARSE_STEP_S);
        if t > end {
            t = end;
        }
        let el = scan.elevation(t)?;
        let above = el >= threshold_deg;
        let prev = history.last().copied();

        match (aos, above) {
            (None, true) => {
                aos = Some(match prev {
                    None => t,
                    Some((pt, _)) => scan.bisect(pt, t)?,
                });
            }
            (Some(start), false) => {
                let los = scan.bisect(prev.expect("pass has a previous sample").0, t)?;
                windows.extend(scan.window(start, los)?);
                aos = None;
            }
            (None, false) => {
                if let [.., (t2, e2), (_, e1)] = history.as_slice() {
                    if *e1 > *e2 && *e1 >= el {
                        let (peak_at, peak) = scan.peak(*t2, t)?;
                        if peak >= threshold_deg {
                            let rise = scan.bisect(*t2, peak_at)?;
                            let set = scan.bisect(peak_at, t)?;
                            windows.extend(scan.window(rise, set)?);
                        }
                    }
                }
            }
            (Some(_), true) => {}
        }

        if history.len() == 2 {
            history.remove(0);
        }
        history.push((t, el));
        if t >= end {
            break;
        }
        k += 1;
    }
    if let Some(start) = aos {
        windows.extend(scan.window(start, end)?);
    }
    windows.sort_by_key(|w| w.aos);
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orbital::{CircularOrbit, PropagatorSpec};

    fn synthetic() -> Propagator {
        Propagator::from_spec(&PropagatorSpec::default()).unwrap()
    }

    fn equatorial_station_under_node() -> GroundStation {
        GroundStation::new("eq", "Equator", 0.0, 0.0, 0.0)
    }

    #[test]
    fn passes_sorted_and_above_threshold() {
        let p = synthetic();
        let s = GroundStation::new("toronto", "Toronto", 43.65, -79.38, 0.0);
        let w = predict_passes(&p, &s, crate::time::sim_epoch(), Duration::hours(24), 0.0).unwrap();
        assert!(!w.is_empty());
        for pair in w.windows(2) {
            assert!(pair[0].aos < pair[1].aos);
        }
        for win in &w {
            assert!(win.aos < win.los);
            assert!(win.max_elevation >= 0.0);
        }
    }

    #[test]
    fn consecutive_passes_roughly_one_period_apart() {
        // Oracle: sweep look angles at 1 s resolution and collect rising edges.
        let p = synthetic();
        let s = equatorial_station_under_node();
        let start = step(crate::time::sim_epoch(), -1000.0);
        let predicted = predict_passes(&p, &s, start, Duration::hours(24), 0.0).unwrap();

        let mut rises = Vec::new();
        let mut prev = true;
        for sec in 0..=24 * 3600 {
            let t = step(start, sec as f64);
            let vis = is_visible(&s, &p.propagate(t).unwrap(), 0.0);
            if vis && !prev {
                rises.push(t);
            }
            prev = vis;
        }
        assert_eq!(predicted.len(), rises.len(), "{predicted:?}");
        for (w, r) in predicted.iter().zip(&rises) {
            assert!(crate::time::seconds(w.aos - *r).abs() <= 1.0);
        }
        // passes on successive orbits are separated by about one period
        let successive: Vec<f64> = predicted
            .windows(2)
            .map(|pair| crate::time::seconds(pair[1].aos - pair[0].aos))
            .filter(|gap| *gap < 1.5 * 5520.0)
            .collect();
        assert!(!successive.is_empty());
        for gap in successive {
            assert!((gap - 5520.0).abs() < 600.0, "gap {gap}");
        }
    }

    #[test]
    fn unreachable_threshold_gives_no_windows() {
        let p = synthetic();
        let s = GroundStation::new("toronto", "Toronto", 43.65, -79.38, 0.0);
        let w = predict_passes(&p, &s, crate::time::sim_epoch(), Duration::hours(24), 90.0).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn short_horizon_before_next_pass_is_empty() {
        let p = synthetic();
        let s = equatorial_station_under_node();
        let t0 = crate::time::sim_epoch();
        let all = predict_passes(&p, &s, t0, Duration::hours(24), 0.0).unwrap();
        let after_first = all[0].los + Duration::seconds(5);
        let gap = (all[1].aos - after_first) / 2;
        assert!(predict_passes(&p, &s, after_first, gap, 0.0).unwrap().is_empty());
    }

    #[test]
    fn range_rate_vanishes_at_peak() {
        let orbit = CircularOrbit::default();
        let p = Propagator::Circular(orbit);
        let s = GroundStation::new("london", "London", 51.5, -0.13, 0.0);
        let w = predict_passes(&p, &s, crate::time::sim_epoch(), Duration::hours(24), 0.0).unwrap();
        let interior: Vec<_> = w
            .iter()
            .filter(|w| w.max_elevation_at > w.aos && w.max_elevation_at < w.los)
            .collect();
        assert!(!interior.is_empty());
        for win in interior {
            let pos = p.propagate(win.max_elevation_at).unwrap();
            let la = look_angles(&s, &pos);
            assert!(la.range_rate.abs() < 0.01, "range rate {}", la.range_rate);
        }
    }

    #[test]
    fn zero_horizon_rejected() {
        let p = synthetic();
        let s = equatorial_station_under_node();
        assert!(predict_passes(&p, &s, crate::time::sim_epoch(), Duration::zero(), 0.0).is_err());
    }
}
