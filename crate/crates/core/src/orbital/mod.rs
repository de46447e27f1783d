//! ISS position, ground-station look angles and contact-window prediction.
//!
//! Look angles use a spherical Earth of radius [`EARTH_RADIUS_KM`] for both
//! propagators. The synthetic circular orbit is exactly periodic in the
//! inertial frame, which keeps pass geometry reproducible for experiments.

mod passes;
mod sgp4;
mod stations;
mod tle;

use std::f64::consts::TAU;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use passes::{is_visible, predict_passes, ContactWindow, COARSE_STEP_S};
pub use sgp4::{gmst, Sgp4, StateVector};
pub use stations::{default_roster, GroundStation, Roster};
pub use tle::{checksum as tle_checksum, MeanElements, TleSet};

use crate::time::{self, Timestamp};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const SIDEREAL_DAY_S: f64 = 86_164.0905;
pub const EARTH_ROTATION_RAD_S: f64 = TAU / SIDEREAL_DAY_S;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrbitalError {
    #[error("TLE error: {0}")]
    Tle(String),
    #[error("invalid epoch: {0}")]
    InvalidEpoch(String),
    #[error("invalid propagator parameters: {0}")]
    InvalidParameters(String),
    #[error("station error: {0}")]
    Station(String),
}

/// Sub-satellite point and altitude over the spherical Earth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPosition {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    /// Inertial speed magnitude, km/s.
    pub velocity: f64,
    #[serde(with = "time::iso_ms")]
    pub timestamp: Timestamp,
    /// Earth-fixed velocity, km/s; used for range rate.
    #[serde(skip, default)]
    pub ecef_velocity: [f64; 3],
}

impl GeodeticPosition {
    pub fn ecef(&self) -> [f64; 3] {
        spherical_to_ecef(self.lat, self.lon, self.alt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookAngles {
    pub elevation: f64,
    pub azimuth: f64,
    pub range: f64,
    /// Positive when the range is increasing.
    pub range_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircularOrbit {
    pub period_s: f64,
    pub inclination_deg: f64,
    pub altitude_km: f64,
    /// Argument of latitude at the epoch.
    pub phase_rad: f64,
    #[serde(default)]
    pub raan_deg: f64,
    #[serde(with = "time::iso_ms", default = "time::sim_epoch")]
    pub epoch: Timestamp,
}

impl Default for CircularOrbit {
    fn default() -> Self {
        Self {
            period_s: 5520.0,
            inclination_deg: 51.6,
            altitude_km: 420.0,
            phase_rad: 0.0,
            raan_deg: 0.0,
            epoch: time::sim_epoch(),
        }
    }
}

impl CircularOrbit {
    pub fn validate(&self) -> Result<(), OrbitalError> {
        if !(self.period_s > 0.0) {
            return Err(OrbitalError::InvalidParameters("period must be positive".into()));
        }
        if !(self.altitude_km > 0.0) {
            return Err(OrbitalError::InvalidParameters("altitude must be positive".into()));
        }
        Ok(())
    }

    /// Inertial position and velocity at `t`.
    pub fn eci(&self, t: Timestamp) -> StateVector {
        let r = EARTH_RADIUS_KM + self.altitude_km;
        let n = TAU / self.period_s;
        let u = self.phase_rad + n * time::seconds(t - self.epoch);
        let (su, cu) = u.sin_cos();
        let (si, ci) = self.inclination_deg.to_radians().sin_cos();
        let (so, co) = self.raan_deg.to_radians().sin_cos();
        StateVector {
            position: [
                r * (cu * co - su * ci * so),
                r * (cu * so + su * ci * co),
                r * su * si,
            ],
            velocity: [
                r * n * (-su * co - cu * ci * so),
                r * n * (-su * so + cu * ci * co),
                r * n * cu * si,
            ],
        }
    }

    fn earth_rotation(&self, t: Timestamp) -> f64 {
        EARTH_ROTATION_RAD_S * time::seconds(t - self.epoch)
    }
}

/// Which propagation model drives the ISS state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PropagatorSpec {
    Sgp4 { name: String, line1: String, line2: String },
    SyntheticCircular(CircularOrbit),
}

impl Default for PropagatorSpec {
    fn default() -> Self {
        PropagatorSpec::SyntheticCircular(CircularOrbit::default())
    }
}

/// A ready-to-use propagator built from a [`PropagatorSpec`].
#[derive(Debug, Clone)]
pub enum Propagator {
    Sgp4(Box<Sgp4>),
    Circular(CircularOrbit),
}

impl Propagator {
    pub fn from_spec(spec: &PropagatorSpec) -> Result<Self, OrbitalError> {
        match spec {
            PropagatorSpec::Sgp4 { name, line1, line2 } => Self::from_tle(&TleSet::parse(name, line1, line2)?),
            PropagatorSpec::SyntheticCircular(orbit) => {
                orbit.validate()?;
                Ok(Propagator::Circular(*orbit))
            }
        }
    }

    pub fn from_tle(tle: &TleSet) -> Result<Self, OrbitalError> {
        Ok(Propagator::Sgp4(Box::new(Sgp4::new(&tle.elements()?)?)))
    }

    pub fn propagate(&self, t: Timestamp) -> Result<GeodeticPosition, OrbitalError> {
        let (state, theta) = match self {
            Propagator::Circular(orbit) => (orbit.eci(t), orbit.earth_rotation(t)),
            Propagator::Sgp4(model) => (model.propagate(t)?, gmst(t)),
        };
        Ok(inertial_to_geodetic(&state, theta, t))
    }
}

/// Convenience wrapper: build a propagator and evaluate it once.
pub fn propagate(spec: &PropagatorSpec, t: Timestamp) -> Result<GeodeticPosition, OrbitalError> {
    Propagator::from_spec(spec)?.propagate(t)
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn spherical_to_ecef(lat_deg: f64, lon_deg: f64, alt_km: f64) -> [f64; 3] {
    let r = EARTH_RADIUS_KM + alt_km;
    let (sl, cl) = lat_deg.to_radians().sin_cos();
    let (so, co) = lon_deg.to_radians().sin_cos();
    [r * cl * co, r * cl * so, r * sl]
}

/// Rotates an inertial state by the Earth rotation angle `theta` and projects
/// it onto the spherical Earth.
fn inertial_to_geodetic(state: &StateVector, theta: f64, t: Timestamp) -> GeodeticPosition {
    let (st, ct) = theta.sin_cos();
    let [x, y, z] = state.position;
    let ecef = [ct * x + st * y, -st * x + ct * y, z];
    let [vx, vy, vz] = state.velocity;
    let v_rot = [ct * vx + st * vy, -st * vx + ct * vy, vz];
    let ecef_velocity = [
        v_rot[0] + EARTH_ROTATION_RAD_S * ecef[1],
        v_rot[1] - EARTH_ROTATION_RAD_S * ecef[0],
        v_rot[2],
    ];
    let r = norm(ecef);
    let mut lon = ecef[1].atan2(ecef[0]).to_degrees();
    if lon >= 180.0 {
        lon -= 360.0;
    }
    GeodeticPosition {
        lat: (ecef[2] / r).clamp(-1.0, 1.0).asin().to_degrees(),
        lon,
        alt: r - EARTH_RADIUS_KM,
        velocity: norm(state.velocity),
        timestamp: t,
        ecef_velocity,
    }
}

/// Elevation, azimuth, range and range rate of the ISS seen from `station`.
pub fn look_angles(station: &GroundStation, iss: &GeodeticPosition) -> LookAngles {
    let sta = spherical_to_ecef(station.lat, station.lon, station.alt);
    let sat = iss.ecef();
    let rho = [sat[0] - sta[0], sat[1] - sta[1], sat[2] - sta[2]];
    let range = norm(rho);

    let (sl, cl) = station.lat.to_radians().sin_cos();
    let (so, co) = station.lon.to_radians().sin_cos();
    let up = [cl * co, cl * so, sl];
    let east = [-so, co, 0.0];
    let north = [-sl * co, -sl * so, cl];

    let u = dot(rho, up);
    let e = dot(rho, east);
    let n = dot(rho, north);
    let elevation = u.atan2(e.hypot(n)).to_degrees();
    let azimuth = if e == 0.0 && n == 0.0 {
        0.0
    } else {
        e.atan2(n).to_degrees().rem_euclid(360.0)
    };
    let range_rate = if range > 0.0 {
        dot(rho, iss.ecef_velocity) / range
    } else {
        0.0
    };
    LookAngles {
        elevation,
        azimuth: if azimuth >= 360.0 { 0.0 } else { azimuth },
        range,
        range_rate,
    }
}

pub(crate) fn step(t: Timestamp, seconds: f64) -> Timestamp {
    t + Duration::microseconds((seconds * 1e6).round() as i64)
}
