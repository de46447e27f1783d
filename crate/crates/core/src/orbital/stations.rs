use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::OrbitalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundStation {
    pub id: String,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub alt: f64,
}

impl GroundStation {
    pub fn new(id: &str, name: &str, lat: f64, lon: f64, alt: f64) -> Self {
        Self {
            id: id.to_string(),
            name: name.to_string(),
            lat,
            lon,
            alt,
        }
    }
}

/// Validated list of ground stations with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GroundStation>", into = "Vec<GroundStation>")]
pub struct Roster(Vec<GroundStation>);

impl Roster {
    pub fn new(stations: Vec<GroundStation>) -> Result<Self, OrbitalError> {
        let mut seen = BTreeSet::new();
        for s in &stations {
            if s.id.is_empty() {
                return Err(OrbitalError::Station("empty station id".into()));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(OrbitalError::Station(format!("duplicate station id {}", s.id)));
            }
            if !(-90.0..=90.0).contains(&s.lat) || !(-180.0..=180.0).contains(&s.lon) {
                return Err(OrbitalError::Station(format!("station {} out of range", s.id)));
            }
        }
        Ok(Self(stations))
    }

    pub fn get(&self, id: &str) -> Option<&GroundStation> {
        self.0.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|s| s.id.as_str())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, GroundStation> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.0.iter().position(|s| s.id == id)
    }
}

impl TryFrom<Vec<GroundStation>> for Roster {
    type Error = OrbitalError;
    fn try_from(v: Vec<GroundStation>) -> Result<Self, Self::Error> {
        Roster::new(v)
    }
}

impl From<Roster> for Vec<GroundStation> {
    fn from(r: Roster) -> Self {
        r.0
    }
}

impl Default for Roster {
    fn default() -> Self {
        default_roster()
    }
}

pub fn default_roster() -> Roster {
    Roster(vec![
        GroundStation::new("toronto", "Toronto", 43.6532, -79.3832, 0.076),
        GroundStation::new("london", "London", 51.5074, -0.1278, 0.011),
        GroundStation::new("tokyo", "Tokyo", 35.6762, 139.6503, 0.040),
        GroundStation::new("sydney", "Sydney", -33.8688, 151.2093, 0.058),
        GroundStation::new("washington", "Washington DC", 38.9072, -77.0369, 0.022),
        GroundStation::new("singapore", "Singapore", 1.3521, 103.8198, 0.015),
        GroundStation::new("bengaluru", "Bengaluru", 12.9716, 77.5946, 0.920),
        GroundStation::new("sao_paulo", "São Paulo", -23.5505, -46.6333, 0.760),
        GroundStation::new("moscow", "Moscow", 55.7558, 37.6173, 0.156),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roster_has_nine_unique_stations() {
        let r = default_roster();
        assert_eq!(r.len(), 9);
        assert!(Roster::new(r.iter().cloned().collect()).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = GroundStation::new("a", "A", 0.0, 0.0, 0.0);
        assert!(Roster::new(vec![s.clone(), s]).is_err());
    }
}
