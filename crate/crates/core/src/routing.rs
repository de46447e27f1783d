//! Contact-station selection, BFS through the ground mesh, and broadcast
//! flooding. Every tie is broken by node id so runs are reproducible.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{DtnBundle, ISS};
use crate::orbital::Roster;
use crate::time::Timestamp;

pub const DEFAULT_HORIZON_S: f64 = 86_400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("no station has a contact within the planning horizon")]
    NoContact,
    #[error("no path from {from} to {to}")]
    Unreachable { from: String, to: String },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("invalid topology: {0}")]
    Topology(String),
}

/// Knows when stations can talk to the ISS.
pub trait PassOracle {
    fn is_visible(&self, station: &str, t: Timestamp) -> bool;
    /// Start of the next contact strictly after `t` and within the horizon.
    fn next_aos(&self, station: &str, t: Timestamp) -> Option<Timestamp>;
}

/// Ground-station mesh as an undirected adjacency list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, Vec<String>>", into = "BTreeMap<String, Vec<String>>")]
pub struct MeshTopology {
    adjacency: BTreeMap<String, BTreeSet<String>>,
}

impl MeshTopology {
    pub fn new<S: AsRef<str>>(
        stations: impl IntoIterator<Item = S>,
        edges: impl IntoIterator<Item = (S, S)>,
    ) -> Result<Self, RoutingError> {
        let mut adjacency: BTreeMap<String, BTreeSet<String>> = stations
            .into_iter()
            .map(|s| (s.as_ref().to_string(), BTreeSet::new()))
            .collect();
        if adjacency.contains_key(ISS) {
            return Err(RoutingError::Topology("ISS is not a mesh node".into()));
        }
        for (a, b) in edges {
            let (a, b) = (a.as_ref(), b.as_ref());
            if a == b {
                return Err(RoutingError::Topology(format!("self-loop at {a}")));
            }
            for n in [a, b] {
                if !adjacency.contains_key(n) {
                    return Err(RoutingError::UnknownNode(n.to_string()));
                }
            }
            adjacency.get_mut(a).unwrap().insert(b.to_string());
            adjacency.get_mut(b).unwrap().insert(a.to_string());
        }
        Ok(Self { adjacency })
    }

    pub fn full_mesh<S: AsRef<str>>(stations: &[S]) -> Self {
        let mut edges = Vec::new();
        for (i, a) in stations.iter().enumerate() {
            for b in &stations[i + 1..] {
                edges.push((a.as_ref(), b.as_ref()));
            }
        }
        Self::new(stations.iter().map(|s| s.as_ref()), edges).expect("full mesh is valid")
    }

    /// Default nine-station partial mesh: complete except for six long
    /// intercontinental pairs, leaving a diameter of two.
    pub fn default_for(roster: &Roster) -> Self {
        const MISSING: [(&str, &str); 6] = [
            ("sydney", "sao_paulo"),
            ("sydney", "moscow"),
            ("sydney", "washington"),
            ("tokyo", "sao_paulo"),
            ("singapore", "sao_paulo"),
            ("bengaluru", "washington"),
        ];
        let ids: Vec<&str> = roster.ids().collect();
        let mut edges = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let cut = MISSING
                    .iter()
                    .any(|(x, y)| (x == a && y == b) || (x == b && y == a));
                if !cut {
                    edges.push((*a, *b));
                }
            }
        }
        Self::new(ids.iter().copied(), edges).expect("roster ids are unique")
    }

    pub fn contains(&self, node: &str) -> bool {
        self.adjacency.contains_key(node)
    }

    pub fn stations(&self) -> impl Iterator<Item = &str> {
        self.adjacency.keys().map(String::as_str)
    }

    pub fn neighbors(&self, node: &str) -> impl Iterator<Item = &str> {
        self.adjacency
            .get(node)
            .into_iter()
            .flat_map(|n| n.iter().map(String::as_str))
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        self.adjacency.get(a).is_some_and(|n| n.contains(b))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum::<usize>() / 2
    }
}

impl TryFrom<BTreeMap<String, Vec<String>>> for MeshTopology {
    type Error = RoutingError;
    fn try_from(adj: BTreeMap<String, Vec<String>>) -> Result<Self, Self::Error> {
        let edges: Vec<(String, String)> = adj
            .iter()
            .flat_map(|(a, ns)| ns.iter().map(move |b| (a.clone(), b.clone())))
            .collect();
        Self::new(adj.keys().cloned(), edges)
    }
}

impl From<MeshTopology> for BTreeMap<String, Vec<String>> {
    fn from(t: MeshTopology) -> Self {
        t.adjacency
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub hops: Vec<String>,
}

impl Route {
    pub fn next_hop(&self) -> Option<&str> {
        self.hops.get(1).map(String::as_str)
    }
}

/// Picks the station to use for the ISS link: a visible station if any,
/// otherwise the one with the earliest next contact. Ties go to the smaller id.
pub fn select_contact_station<'a>(
    candidates: impl IntoIterator<Item = &'a str>,
    t: Timestamp,
    oracle: &dyn PassOracle,
) -> Result<String, RoutingError> {
    select_contact_station_ranked(candidates.into_iter().map(|s| (s, 0)), t, oracle)
}

/// As [`select_contact_station`], but each candidate carries a cost (hop
/// distance) that ranks before the id: the cheapest visible station wins, and
/// among equally early contacts the cheapest one.
pub fn select_contact_station_ranked<'a>(
    candidates: impl IntoIterator<Item = (&'a str, usize)>,
    t: Timestamp,
    oracle: &dyn PassOracle,
) -> Result<String, RoutingError> {
    let mut ranked: Vec<(usize, &str)> = candidates.into_iter().map(|(s, c)| (c, s)).collect();
    ranked.sort_unstable();
    ranked.dedup_by(|a, b| a.1 == b.1);
    if let Some((_, v)) = ranked.iter().find(|(_, s)| oracle.is_visible(s, t)) {
        return Ok(v.to_string());
    }
    ranked
        .iter()
        .filter_map(|(c, s)| oracle.next_aos(s, t).map(|aos| (aos, *c, *s)))
        .min()
        .map(|(_, _, s)| s.to_string())
        .ok_or(RoutingError::NoContact)
}

/// Minimum-hop path, expanding neighbours in id order and never entering a
/// node in `avoid`.
pub fn bfs_path(
    topology: &MeshTopology,
    src: &str,
    dst: &str,
    avoid: &BTreeSet<String>,
) -> Result<Route, RoutingError> {
    for n in [src, dst] {
        if !topology.contains(n) {
            return Err(RoutingError::UnknownNode(n.to_string()));
        }
    }
    if src == dst {
        return Ok(Route {
            hops: vec![src.to_string()],
        });
    }
    let mut parent: BTreeMap<&str, &str> = BTreeMap::new();
    let mut seen: BTreeSet<&str> = BTreeSet::from([src]);
    let mut frontier = VecDeque::from([src]);
    while let Some(node) = frontier.pop_front() {
        for next in topology.neighbors(node) {
            if avoid.contains(next) || !seen.insert(next) {
                continue;
            }
            parent.insert(next, node);
            if next == dst {
                let mut hops = vec![dst.to_string()];
                let mut cur = dst;
                while let Some(p) = parent.get(cur) {
                    hops.push(p.to_string());
                    cur = p;
                }
                hops.reverse();
                return Ok(Route { hops });
            }
            frontier.push_back(next);
        }
    }
    Err(RoutingError::Unreachable {
        from: src.to_string(),
        to: dst.to_string(),
    })
}

/// Hop distance from `src` to every node reachable without entering `avoid`.
fn distances(topology: &MeshTopology, src: &str, avoid: &BTreeSet<String>) -> BTreeMap<String, usize> {
    let mut dist = BTreeMap::from([(src.to_string(), 0)]);
    let mut frontier = VecDeque::from([src.to_string()]);
    while let Some(node) = frontier.pop_front() {
        let d = dist[&node];
        for next in topology.neighbors(&node) {
            if !avoid.contains(next) && !dist.contains_key(next) {
                dist.insert(next.to_string(), d + 1);
                frontier.push_back(next.to_string());
            }
        }
    }
    dist
}

/// `src .. contact_station, ISS`, preferring contact stations close to `src`.
/// Nodes in `avoid` (other than `src`) are not
/// used, which keeps re-routed bundles from revisiting their hop list.
pub fn route_to_iss(
    topology: &MeshTopology,
    src: &str,
    t: Timestamp,
    oracle: &dyn PassOracle,
    avoid: &BTreeSet<String>,
) -> Result<Route, RoutingError> {
    if !topology.contains(src) {
        return Err(RoutingError::UnknownNode(src.to_string()));
    }
    let mut avoid = avoid.clone();
    avoid.remove(src);
    let dist = distances(topology, src, &avoid);
    let contact = select_contact_station_ranked(dist.iter().map(|(s, d)| (s.as_str(), *d)), t, oracle)?;
    let mut route = bfs_path(topology, src, &contact, &avoid)?;
    route.hops.push(ISS.to_string());
    Ok(route)
}

/// `ISS, contact_station .. dst`, preferring contact stations close to `dst`.
pub fn route_from_iss(
    topology: &MeshTopology,
    dst: &str,
    t: Timestamp,
    oracle: &dyn PassOracle,
) -> Result<Route, RoutingError> {
    if !topology.contains(dst) {
        return Err(RoutingError::UnknownNode(dst.to_string()));
    }
    let dist = distances(topology, dst, &BTreeSet::new());
    let contact = select_contact_station_ranked(dist.iter().map(|(s, d)| (s.as_str(), *d)), t, oracle)?;
    let ground = bfs_path(topology, &contact, dst, &BTreeSet::new())?;
    let mut hops = vec![ISS.to_string()];
    hops.extend(ground.hops);
    Ok(Route { hops })
}

/// Bundle ids each node has already flooded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BroadcastState {
    received: BTreeMap<String, BTreeSet<String>>,
}

impl BroadcastState {
    pub fn has_processed(&self, node: &str, bundle_id: &str) -> bool {
        self.received.get(node).is_some_and(|s| s.contains(bundle_id))
    }
}

/// Processes a broadcast bundle at `at`: returns the neighbours to forward to,
/// or nothing if `at` already handled this bundle.
pub fn flood(
    bundle: &DtnBundle,
    topology: &MeshTopology,
    state: &mut BroadcastState,
    at: &str,
) -> Vec<(String, DtnBundle)> {
    let fresh = state
        .received
        .entry(at.to_string())
        .or_default()
        .insert(bundle.bundle_id.clone());
    if !fresh {
        return Vec::new();
    }
    topology
        .neighbors(at)
        .filter(|n| !bundle.hop_list.iter().any(|h| h == n))
        .map(|n| (n.to_string(), bundle.clone()))
        .collect()
}
