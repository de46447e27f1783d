use serde::{Deserialize, Serialize};

use crate::bundle::BundleStatus;
use crate::time::{self, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
    pub max_s: f64,
}

/// Mean, median, nearest-rank 95th percentile and maximum. `None` when there
/// are no samples.
pub fn latency_stats(latencies: &[f64]) -> Option<LatencyStats> {
    if latencies.is_empty() {
        return None;
    }
    let mut v = latencies.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Some(LatencyStats {
        mean_s: v.iter().sum::<f64>() / n as f64,
        median_s: median,
        p95_s: v[rank - 1],
        max_s: v[n - 1],
    })
}

/// Per-bundle outcome, one row of the bundle trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleTrace {
    pub bundle_id: String,
    pub source: String,
    pub destination: String,
    pub priority: String,
    pub plaintext_bytes: usize,
    pub encrypted_bytes: usize,
    pub fragments: u32,
    #[serde(with = "time::iso_ms")]
    pub created_at: Timestamp,
    #[serde(with = "time::iso_ms_opt")]
    pub delivered_at: Option<Timestamp>,
    pub status: BundleStatus,
    pub latency_s: Option<f64>,
    pub hops: Option<usize>,
    pub retransmissions: u32,
    pub route: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub seed: u64,
    pub bundles: usize,
    pub delivered: usize,
    pub failed: usize,
    pub expired: usize,
    pub in_flight: usize,
    /// Vacuously 1.0 when no bundles were injected.
    pub delivery_ratio: f64,
    pub latency: Option<LatencyStats>,
    pub mean_hops: Option<f64>,
    pub retransmissions: u32,
    pub custody_acks: u32,
    pub delivery_acks: u32,
    pub naks: u32,
    pub transmissions: u32,
    pub fragments: u32,
    pub virtual_duration_s: f64,
    pub traces: Vec<BundleTrace>,
}

impl MetricsRecord {
    pub fn from_traces(scenario: &str, seed: u64, traces: Vec<BundleTrace>, counters: Counters, virtual_duration_s: f64) -> Self {
        let count = |s: BundleStatus| traces.iter().filter(|t| t.status == s).count();
        let delivered = count(BundleStatus::Delivered);
        let latencies: Vec<f64> = traces.iter().filter_map(|t| t.latency_s).collect();
        let hops: Vec<usize> = traces.iter().filter_map(|t| t.hops).collect();
        let bundles = traces.len();
        Self {
            scenario: scenario.to_string(),
            seed,
            bundles,
            delivered,
            failed: count(BundleStatus::Failed),
            expired: count(BundleStatus::Expired),
            in_flight: traces.iter().filter(|t| !t.status.is_terminal()).count(),
            delivery_ratio: if bundles == 0 {
                1.0
            } else {
                delivered as f64 / bundles as f64
            },
            latency: latency_stats(&latencies),
            mean_hops: (!hops.is_empty()).then(|| hops.iter().sum::<usize>() as f64 / hops.len() as f64),
            retransmissions: counters.retransmissions,
            custody_acks: counters.custody_acks,
            delivery_acks: counters.delivery_acks,
            naks: counters.naks,
            transmissions: counters.transmissions,
            fragments: counters.fragments,
            virtual_duration_s,
            traces,
        }
    }

    /// The bundle trace as CSV, one row per bundle in id order.
    pub fn traces_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "bundle_id",
            "source",
            "destination",
            "priority",
            "plaintext_bytes",
            "encrypted_bytes",
            "fragments",
            "created_at",
            "delivered_at",
            "status",
            "latency_s",
            "hops",
            "retransmissions",
            "route",
        ])
        .expect("in-memory write");
        for t in &self.traces {
            w.write_record([
                t.bundle_id.clone(),
                t.source.clone(),
                t.destination.clone(),
                t.priority.clone(),
                t.plaintext_bytes.to_string(),
                t.encrypted_bytes.to_string(),
                t.fragments.to_string(),
                time::format(&t.created_at),
                t.delivered_at.as_ref().map(time::format).unwrap_or_default(),
                t.status.as_str().to_string(),
                t.latency_s.map(|l| format!("{l:.3}")).unwrap_or_default(),
                t.hops.map(|h| h.to_string()).unwrap_or_default(),
                t.retransmissions.to_string(),
                t.route.clone(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
    }

    /// Summary without per-bundle rows, as pretty JSON.
    pub fn summary_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("metrics serialize");
        v.as_object_mut().expect("object").remove("traces");
        serde_json::to_string_pretty(&v).expect("json")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub transmissions: u32,
    pub retransmissions: u32,
    pub custody_acks: u32,
    pub delivery_acks: u32,
    pub naks: u32,
    pub fragments: u32,
    pub aborted: u32,
}
