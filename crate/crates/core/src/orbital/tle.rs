use std::path::Path;

use chrono::{Duration, TimeZone, Utc};

use super::OrbitalError;
use crate::time::Timestamp;

/// A two-line element set as published by NORAD/celestrak.
#[derive(Debug, Clone, PartialEq)]
pub struct TleSet {
    pub name: String,
    pub line1: String,
    pub line2: String,
    pub epoch: Timestamp,
}

/// Mean elements extracted from a [`TleSet`], in TLE units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanElements {
    pub epoch: Timestamp,
    pub bstar: f64,
    pub inclination_deg: f64,
    pub raan_deg: f64,
    pub eccentricity: f64,
    pub arg_perigee_deg: f64,
    pub mean_anomaly_deg: f64,
    pub mean_motion_rev_day: f64,
}

/// Standard modulo-10 checksum over the first 68 columns: digits count at face
/// value, a minus sign counts as one, everything else as zero.
pub fn checksum(line: &str) -> u32 {
    line.chars()
        .take(68)
        .map(|c| match c {
            '0'..='9' => c as u32 - '0' as u32,
            '-' => 1,
            _ => 0,
        })
        .sum::<u32>()
        % 10
}

fn verify_line(line: &str, number: char) -> Result<(), OrbitalError> {
    if line.len() != 69 || !line.is_ascii() {
        return Err(OrbitalError::Tle(format!(
            "line {number} must be 69 ASCII characters, got {}",
            line.len()
        )));
    }
    if !line.starts_with(number) {
        return Err(OrbitalError::Tle(format!("line {number} has wrong line number")));
    }
    let expected = line[68..69]
        .parse::<u32>()
        .map_err(|_| OrbitalError::Tle(format!("line {number} checksum is not a digit")))?;
    let actual = checksum(line);
    if expected != actual {
        return Err(OrbitalError::Tle(format!(
            "line {number} checksum mismatch: expected {expected}, computed {actual}"
        )));
    }
    Ok(())
}

fn field(line: &str, range: std::ops::Range<usize>, what: &str) -> Result<f64, OrbitalError> {
    let raw = line[range].trim();
    raw.parse::<f64>()
        .map_err(|_| OrbitalError::Tle(format!("cannot parse {what} from {raw:?}")))
}

/// Parses the TLE "assumed decimal point" exponent notation, e.g. ` 28098-4`.
fn exp_field(line: &str, range: std::ops::Range<usize>, what: &str) -> Result<f64, OrbitalError> {
    let raw = line[range].trim();
    if raw.is_empty() {
        return Ok(0.0);
    }
    let (mantissa, exponent) = raw.split_at(raw.len() - 2);
    let (sign, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (-1.0, rest),
        None => (1.0, mantissa.trim_start_matches('+')),
    };
    let mantissa: f64 = format!("0.{digits}")
        .parse()
        .map_err(|_| OrbitalError::Tle(format!("cannot parse {what} from {raw:?}")))?;
    let exponent: i32 = exponent
        .parse()
        .map_err(|_| OrbitalError::Tle(format!("cannot parse {what} exponent from {raw:?}")))?;
    Ok(sign * mantissa * 10f64.powi(exponent))
}

fn parse_epoch(line1: &str) -> Result<Timestamp, OrbitalError> {
    let yy = field(line1, 18..20, "epoch year")? as i32;
    let day = field(line1, 20..32, "epoch day")?;
    let year = if yy < 57 { 2000 + yy } else { 1900 + yy };
    let start = Utc
        .with_ymd_and_hms(year, 1, 1, 0, 0, 0)
        .single()
        .ok_or_else(|| OrbitalError::Tle("invalid epoch year".into()))?;
    let micros = ((day - 1.0) * 86_400e6).round() as i64;
    Ok(start + Duration::microseconds(micros))
}

impl TleSet {
    pub fn parse(name: &str, line1: &str, line2: &str) -> Result<Self, OrbitalError> {
        let line1 = line1.trim_end();
        let line2 = line2.trim_end();
        verify_line(line1, '1')?;
        verify_line(line2, '2')?;
        if line1[2..7] != line2[2..7] {
            return Err(OrbitalError::Tle("catalog numbers of the two lines differ".into()));
        }
        Ok(Self {
            name: name.trim().to_string(),
            line1: line1.to_string(),
            line2: line2.to_string(),
            epoch: parse_epoch(line1)?,
        })
    }

    /// Parses a three-line (name + two element lines) document. A bare
    /// two-line document is accepted with an empty name.
    pub fn parse_text(text: &str) -> Result<Self, OrbitalError> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        match lines.as_slice() {
            [name, l1, l2, ..] if !name.starts_with("1 ") => Self::parse(name, l1, l2),
            [l1, l2, ..] => Self::parse("", l1, l2),
            _ => Err(OrbitalError::Tle("expected a name line and two element lines".into())),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OrbitalError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| OrbitalError::Tle(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse_text(&text)
    }

    pub fn elements(&self) -> Result<MeanElements, OrbitalError> {
        let l1 = &self.line1;
        let l2 = &self.line2;
        Ok(MeanElements {
            epoch: self.epoch,
            bstar: exp_field(l1, 53..61, "bstar")?,
            inclination_deg: field(l2, 8..16, "inclination")?,
            raan_deg: field(l2, 17..25, "right ascension")?,
            eccentricity: format!("0.{}", l2[26..33].trim())
                .parse()
                .map_err(|_| OrbitalError::Tle("cannot parse eccentricity".into()))?,
            arg_perigee_deg: field(l2, 34..42, "argument of perigee")?,
            mean_anomaly_deg: field(l2, 43..51, "mean anomaly")?,
            mean_motion_rev_day: field(l2, 52..63, "mean motion")?,
        })
    }
}
