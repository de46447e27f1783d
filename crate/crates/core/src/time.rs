//! UTC timestamp helpers shared by every document format.
//!
//! All persisted and wire-level timestamps are ISO-8601 UTC strings with
//! millisecond precision, so a value survives a round trip unchanged only if
//! it was truncated to whole milliseconds first.

use chrono::{DateTime, Duration, SubsecRound, TimeZone, Utc};

pub type Timestamp = DateTime<Utc>;

const FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.3fZ";

/// Fixed epoch used by simulations and tests when no wall clock is involved.
pub fn sim_epoch() -> Timestamp {
    Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap()
}

pub fn truncate_ms(t: Timestamp) -> Timestamp {
    t.trunc_subsecs(3)
}

pub fn format(t: &Timestamp) -> String {
    t.format(FORMAT).to_string()
}

pub fn parse(s: &str) -> Result<Timestamp, chrono::ParseError> {
    DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc))
}

pub fn seconds(d: Duration) -> f64 {
    d.num_microseconds()
        .map(|us| us as f64 / 1e6)
        .unwrap_or_else(|| d.num_milliseconds() as f64 / 1e3)
}

pub fn from_seconds(s: f64) -> Duration {
    Duration::microseconds((s * 1e6).round() as i64)
}

/// Serde adapter for [`Timestamp`] fields.
pub mod iso_ms {
    use super::Timestamp;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for `Option<Timestamp>` fields.
pub mod iso_ms_opt {
    use super::Timestamp;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Option<Timestamp>, s: S) -> Result<S::Ok, S::Error> {
        match t {
            Some(t) => s.serialize_some(&super::format(t)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Timestamp>, D::Error> {
        let raw = Option::<String>::deserialize(d)?;
        raw.map(|r| super::parse(&r).map_err(serde::de::Error::custom))
            .transpose()
    }
}
