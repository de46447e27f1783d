//! SQLite persistence for bundles, transmissions and acknowledgments.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use rusqlite::{params, Connection, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleStatus, DtnBundle, Endpoint, Priority};
use crate::custody::{AckKind, AckMessage};
use crate::sim::{BundleRecord, Journal, TransmissionLog};
use crate::time::{self, Timestamp};

pub const SCHEMA_VERSION: i64 = 2;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("database error: {0}")]
    Db(#[from] rusqlite::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bundle {0} not found")]
    NotFound(String),
    #[error("corrupt row for {id}: {reason}")]
    Row { id: String, reason: String },
    #[error("schema version {found} is newer than supported {supported}")]
    Schema { found: i64, supported: i64 },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A bundle as persisted: the full bundle plus delivery bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredBundle {
    pub bundle: DtnBundle,
    pub route: Vec<String>,
    #[serde(with = "time::iso_ms_opt")]
    pub delivered_at: Option<Timestamp>,
}

impl From<&BundleRecord> for StoredBundle {
    fn from(r: &BundleRecord) -> Self {
        Self {
            bundle: r.bundle.clone(),
            route: r.route.clone(),
            delivered_at: r.delivered_at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok,
    Timeout,
    Nak,
    Failed,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Timeout => "timeout",
            Self::Nak => "nak",
            Self::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ok" => Self::Ok,
            "timeout" => Self::Timeout,
            "nak" => Self::Nak,
            "failed" => Self::Failed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionRecord {
    pub bundle_id: String,
    pub from: String,
    pub to: String,
    #[serde(with = "time::iso_ms")]
    pub started_at: Timestamp,
    #[serde(with = "time::iso_ms_opt")]
    pub completed_at: Option<Timestamp>,
    pub outcome: Outcome,
    /// 1 for the first send of this bundle by `from`.
    pub attempt_number: u32,
}

impl From<&TransmissionLog> for TransmissionRecord {
    fn from(t: &TransmissionLog) -> Self {
        Self {
            bundle_id: t.bundle_id.clone(),
            from: t.from.clone(),
            to: t.to.clone(),
            started_at: t.started_at,
            completed_at: Some(t.ended_at),
            outcome: Outcome::parse(&t.outcome).unwrap_or(Outcome::Failed),
            attempt_number: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaVersion {
    pub version: i64,
    #[serde(with = "time::iso_ms")]
    pub applied_at: Timestamp,
}

/// Filters for [`Store::history`]; all optional and combined with AND.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryFilter {
    pub status: Option<BundleStatus>,
    /// Matches either the source or the destination.
    pub endpoint: Option<String>,
    pub since: Option<Timestamp>,
    pub until: Option<Timestamp>,
}

const V1: &str = "
CREATE TABLE IF NOT EXISTS bundles (
    bundle_id TEXT PRIMARY KEY,
    source TEXT NOT NULL,
    destination TEXT NOT NULL,
    encrypted_payload TEXT NOT NULL,
    payload_hash TEXT NOT NULL,
    priority TEXT NOT NULL,
    created_at TEXT NOT NULL,
    ttl_s INTEGER NOT NULL,
    custody INTEGER NOT NULL,
    hop_list TEXT NOT NULL,
    status TEXT NOT NULL,
    security TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS bundles_created ON bundles (created_at);
";

const V2: &str = "
CREATE TABLE IF NOT EXISTS transmissions (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    bundle_id TEXT NOT NULL,
    from_node TEXT NOT NULL,
    to_node TEXT NOT NULL,
    started_at TEXT NOT NULL,
    completed_at TEXT,
    outcome TEXT NOT NULL,
    attempt_number INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS acks (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    kind TEXT NOT NULL,
    bundle_id TEXT NOT NULL,
    from_node TEXT NOT NULL,
    at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS transmissions_bundle ON transmissions (bundle_id);
";

/// Columns added after the first schema: (name, declaration).
const BUNDLE_COLUMNS: [(&str, &str); 3] = [
    ("fragment", "TEXT"),
    ("route", "TEXT NOT NULL DEFAULT '[]'"),
    ("delivered_at", "TEXT"),
];

/// Handle to a store file. Each operation opens its own connection;
/// mutations are serialized through an internal lock.
#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    write: Mutex<()>,
    recovered: Option<PathBuf>,
}

fn is_corruption(e: &StoreError) -> bool {
    use rusqlite::ErrorCode::{DatabaseCorrupt, NotADatabase};
    match e {
        StoreError::Db(rusqlite::Error::SqliteFailure(f, _)) => matches!(f.code, DatabaseCorrupt | NotADatabase),
        StoreError::Schema { .. } => true,
        _ => false,
    }
}

fn ts(t: &Timestamp) -> String {
    time::format(t)
}

fn parse_ts(id: &str, s: &str) -> Result<Timestamp, StoreError> {
    time::parse(s).map_err(|e| StoreError::Row {
        id: id.to_string(),
        reason: format!("timestamp {s:?}: {e}"),
    })
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn unjson<T: for<'de> Deserialize<'de>>(id: &str, what: &str, s: &str) -> Result<T, StoreError> {
    serde_json::from_str(s).map_err(|e| StoreError::Row {
        id: id.to_string(),
        reason: format!("{what}: {e}"),
    })
}

impl Store {
    /// Opens (creating if needed) and migrates the store at `path`. A file
    /// that is not a readable database is moved aside and replaced.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self {
            path: path.clone(),
            write: Mutex::new(()),
            recovered: None,
        };
        match store.migrate() {
            Ok(_) => Ok(store),
            Err(e) if is_corruption(&e) => {
                let moved = recover_corruption(&path)?;
                store.recovered = Some(moved);
                store.migrate()?;
                Ok(store)
            }
            Err(e) => Err(e),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Where the corrupt file was moved, when opening had to recover.
    pub fn recovered_from(&self) -> Option<&Path> {
        self.recovered.as_deref()
    }

    fn conn(&self) -> Result<Connection, StoreError> {
        let c = Connection::open(&self.path)?;
        c.busy_timeout(std::time::Duration::from_secs(5))?;
        Ok(c)
    }

    fn write<T>(&self, f: impl FnOnce(&Transaction) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let _guard = self.write.lock().unwrap_or_else(|p| p.into_inner());
        let mut c = self.conn()?;
        let tx = c.transaction()?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    /// Brings the schema to [`SCHEMA_VERSION`], adding any missing columns.
    pub fn migrate(&self) -> Result<SchemaVersion, StoreError> {
        self.write(|tx| {
            tx.execute_batch(
                "CREATE TABLE IF NOT EXISTS schema_version (version INTEGER NOT NULL, applied_at TEXT NOT NULL);",
            )?;
            let current: i64 = tx.query_row("SELECT COALESCE(MAX(version), 0) FROM schema_version", [], |r| r.get(0))?;
            if current > SCHEMA_VERSION {
                return Err(StoreError::Schema {
                    found: current,
                    supported: SCHEMA_VERSION,
                });
            }
            tx.execute_batch(V1)?;
            let existing: Vec<String> = tx
                .prepare("SELECT name FROM pragma_table_info('bundles')")?
                .query_map([], |r| r.get(0))?
                .collect::<Result<_, _>>()?;
            for (name, decl) in BUNDLE_COLUMNS {
                if !existing.iter().any(|c| c == name) {
                    tx.execute_batch(&format!("ALTER TABLE bundles ADD COLUMN {name} {decl};"))?;
                }
            }
            tx.execute_batch(V2)?;
            let now = time::truncate_ms(Utc::now());
            if current < SCHEMA_VERSION {
                tx.execute(
                    "INSERT INTO schema_version (version, applied_at) VALUES (?1, ?2)",
                    params![SCHEMA_VERSION, ts(&now)],
                )?;
            }
            let (version, applied): (i64, String) = tx.query_row(
                "SELECT version, applied_at FROM schema_version ORDER BY version DESC LIMIT 1",
                [],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )?;
            Ok(SchemaVersion {
                version,
                applied_at: parse_ts("schema_version", &applied)?,
            })
        })
    }

    pub fn schema_history(&self) -> Result<Vec<SchemaVersion>, StoreError> {
        let c = self.conn()?;
        let rows: Vec<(i64, String)> = c
            .prepare("SELECT version, applied_at FROM schema_version ORDER BY version")?
            .query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?
            .collect::<Result<_, _>>()?;
        rows.into_iter()
            .map(|(version, at)| {
                Ok(SchemaVersion {
                    version,
                    applied_at: parse_ts("schema_version", &at)?,
                })
            })
            .collect()
    }

    /// Insert or replace by bundle id.
    pub fn persist_bundle(&self, rec: &StoredBundle) -> Result<(), StoreError> {
        self.write(|tx| upsert(tx, rec))
    }

    pub fn load_bundle(&self, bundle_id: &str) -> Result<StoredBundle, StoreError> {
        let c = self.conn()?;
        let row = c
            .query_row(&format!("{SELECT_BUNDLE} WHERE bundle_id = ?1"), [bundle_id], raw_row)
            .optional()?;
        row.ok_or_else(|| StoreError::NotFound(bundle_id.to_string()))?.decode()
    }

    pub fn update_status(&self, bundle_id: &str, status: BundleStatus) -> Result<(), StoreError> {
        self.write(|tx| {
            let n = tx.execute(
                "UPDATE bundles SET status = ?1 WHERE bundle_id = ?2",
                params![status.as_str(), bundle_id],
            )?;
            if n == 0 {
                return Err(StoreError::NotFound(bundle_id.to_string()));
            }
            Ok(())
        })
    }

    /// Appends a transmission; `attempt_number` is assigned from the count
    /// of earlier sends of the bundle by the same node.
    pub fn record_transmission(&self, t: &TransmissionRecord) -> Result<u32, StoreError> {
        self.write(|tx| insert_transmission(tx, t))
    }

    pub fn record_ack(&self, ack: &AckMessage) -> Result<(), StoreError> {
        self.write(|tx| insert_ack(tx, ack))
    }

    /// Writes a drained engine journal in one transaction.
    pub fn persist_journal(&self, j: &Journal) -> Result<(), StoreError> {
        if j.bundles.is_empty() && j.transmissions.is_empty() && j.acks.is_empty() {
            return Ok(());
        }
        self.write(|tx| {
            for b in &j.bundles {
                upsert(tx, &StoredBundle::from(b))?;
            }
            for t in &j.transmissions {
                insert_transmission(tx, &TransmissionRecord::from(t))?;
            }
            for a in &j.acks {
                insert_ack(tx, a)?;
            }
            Ok(())
        })
    }

    /// Bundles matching `f`, oldest first.
    pub fn history(&self, f: &HistoryFilter) -> Result<Vec<StoredBundle>, StoreError> {
        let mut sql = format!("{SELECT_BUNDLE} WHERE 1 = 1");
        let mut args: Vec<String> = Vec::new();
        if let Some(s) = f.status {
            args.push(s.as_str().to_string());
            sql += &format!(" AND status = ?{}", args.len());
        }
        if let Some(e) = &f.endpoint {
            args.push(e.clone());
            sql += &format!(" AND (source = ?{0} OR destination = ?{0})", args.len());
        }
        if let Some(t) = f.since {
            args.push(ts(&t));
            sql += &format!(" AND created_at >= ?{}", args.len());
        }
        if let Some(t) = f.until {
            args.push(ts(&t));
            sql += &format!(" AND created_at <= ?{}", args.len());
        }
        sql += " ORDER BY created_at, bundle_id";
        let c = self.conn()?;
        let rows: Vec<RawRow> = c
            .prepare(&sql)?
            .query_map(rusqlite::params_from_iter(args.iter()), raw_row)?
            .collect::<Result<_, _>>()?;
        rows.into_iter().map(RawRow::decode).collect()
    }

    pub fn transmissions(&self, bundle_id: Option<&str>) -> Result<Vec<TransmissionRecord>, StoreError> {
        let c = self.conn()?;
        let mut stmt = c.prepare(
            "SELECT bundle_id, from_node, to_node, started_at, completed_at, outcome, attempt_number
             FROM transmissions WHERE ?1 IS NULL OR bundle_id = ?1 ORDER BY id",
        )?;
        let rows: Vec<(String, String, String, String, Option<String>, String, u32)> = stmt
            .query_map([bundle_id], |r| {
                Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?, r.get(6)?))
            })?
            .collect::<Result<_, _>>()?;
        rows.into_iter()
            .map(|(id, from, to, start, end, outcome, attempt)| {
                Ok(TransmissionRecord {
                    started_at: parse_ts(&id, &start)?,
                    completed_at: end.map(|e| parse_ts(&id, &e)).transpose()?,
                    outcome: Outcome::parse(&outcome).ok_or_else(|| StoreError::Row {
                        id: id.clone(),
                        reason: format!("outcome {outcome:?}"),
                    })?,
                    bundle_id: id,
                    from,
                    to,
                    attempt_number: attempt,
                })
            })
            .collect()
    }

    pub fn acks(&self) -> Result<Vec<AckMessage>, StoreError> {
        let c = self.conn()?;
        let rows: Vec<(String, String, String, String)> = c
            .prepare("SELECT kind, bundle_id, from_node, at FROM acks ORDER BY id")?
            .query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)))?
            .collect::<Result<_, _>>()?;
        rows.into_iter()
            .map(|(kind, id, from, at)| {
                Ok(AckMessage {
                    kind: unjson::<AckKind>(&id, "kind", &format!("\"{kind}\""))?,
                    at: parse_ts(&id, &at)?,
                    bundle_id: id,
                    from,
                })
            })
            .collect()
    }

    /// Copies the database file to `dest`.
    pub fn backup(&self, dest: impl AsRef<Path>) -> Result<(), StoreError> {
        let _guard = self.write.lock().unwrap_or_else(|p| p.into_inner());
        let c = self.conn()?;
        c.execute("VACUUM INTO ?1", [dest.as_ref().to_string_lossy()])?;
        Ok(())
    }

    /// Writes `bundles.csv`, `transmissions.csv` and `acks.csv` into `dir`.
    pub fn export_csv(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, StoreError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let c = self.conn()?;
        let mut out = Vec::new();
        for table in ["bundles", "transmissions", "acks"] {
            let path = dir.join(format!("{table}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            let mut stmt = c.prepare(&format!("SELECT * FROM {table} ORDER BY rowid"))?;
            let cols: Vec<String> = stmt.column_names().into_iter().map(str::to_string).collect();
            w.write_record(&cols)?;
            let mut rows = stmt.query([])?;
            while let Some(r) = rows.next()? {
                let rec: Vec<String> = (0..cols.len())
                    .map(|i| match r.get_ref(i) {
                        Ok(rusqlite::types::ValueRef::Null) | Err(_) => String::new(),
                        Ok(rusqlite::types::ValueRef::Integer(n)) => n.to_string(),
                        Ok(rusqlite::types::ValueRef::Real(x)) => x.to_string(),
                        Ok(rusqlite::types::ValueRef::Text(t) | rusqlite::types::ValueRef::Blob(t)) => {
                            String::from_utf8_lossy(t).into_owned()
                        }
                    })
                    .collect();
                w.write_record(&rec)?;
            }
            w.flush()?;
            out.push(path);
        }
        Ok(out)
    }
}

/// Moves the file at `path` aside as `<name>.corrupt-<timestamp>` and returns
/// the new location. The caller reopens to get a fresh store.
pub fn recover_corruption(path: &Path) -> Result<PathBuf, StoreError> {
    let stamp = Utc::now().format("%Y%m%dT%H%M%S%3fZ");
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let dest = path.with_file_name(format!("{name}.corrupt-{stamp}"));
    fs::rename(path, &dest)?;
    for suffix in ["-journal", "-wal", "-shm"] {
        let side = path.with_file_name(format!("{name}{suffix}"));
        if side.exists() {
            fs::remove_file(side)?;
        }
    }
    Ok(dest)
}

const SELECT_BUNDLE: &str = "SELECT bundle_id, source, destination, encrypted_payload, payload_hash, priority,
    created_at, ttl_s, custody, hop_list, status, security, fragment, route, delivered_at FROM bundles";

struct RawRow {
    id: String,
    source: String,
    destination: String,
    encrypted_payload: String,
    payload_hash: String,
    priority: String,
    created_at: String,
    ttl_s: i64,
    custody: bool,
    hop_list: String,
    status: String,
    security: String,
    fragment: Option<String>,
    route: String,
    delivered_at: Option<String>,
}

fn raw_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<RawRow> {
    Ok(RawRow {
        id: r.get(0)?,
        source: r.get(1)?,
        destination: r.get(2)?,
        encrypted_payload: r.get(3)?,
        payload_hash: r.get(4)?,
        priority: r.get(5)?,
        created_at: r.get(6)?,
        ttl_s: r.get(7)?,
        custody: r.get(8)?,
        hop_list: r.get(9)?,
        status: r.get(10)?,
        security: r.get(11)?,
        fragment: r.get(12)?,
        route: r.get(13)?,
        delivered_at: r.get(14)?,
    })
}

impl RawRow {
    fn decode(self) -> Result<StoredBundle, StoreError> {
        let id = self.id;
        let bad = |what: &str, e: String| StoreError::Row {
            id: id.clone(),
            reason: format!("{what}: {e}"),
        };
        let bundle = DtnBundle {
            source: Endpoint::new(self.source).map_err(|e| bad("source", e.to_string()))?,
            destination: Endpoint::new(self.destination).map_err(|e| bad("destination", e.to_string()))?,
            encrypted_payload: self.encrypted_payload,
            payload_hash: self.payload_hash,
            priority: unjson::<Priority>(&id, "priority", &format!("\"{}\"", self.priority))?,
            created_at: parse_ts(&id, &self.created_at)?,
            ttl_s: u64::try_from(self.ttl_s).map_err(|e| bad("ttl_s", e.to_string()))?,
            custody: self.custody,
            hop_list: unjson(&id, "hop_list", &self.hop_list)?,
            status: self.status.parse().map_err(|e: crate::bundle::BundleError| bad("status", e.to_string()))?,
            security: unjson(&id, "security", &self.security)?,
            fragment: self.fragment.map(|f| unjson(&id, "fragment", &f)).transpose()?,
            bundle_id: id.clone(),
        };
        Ok(StoredBundle {
            route: unjson(&id, "route", &self.route)?,
            delivered_at: self.delivered_at.map(|d| parse_ts(&id, &d)).transpose()?,
            bundle,
        })
    }
}

fn upsert(tx: &Transaction, rec: &StoredBundle) -> Result<(), StoreError> {
    let b = &rec.bundle;
    let priority = serde_json::to_value(b.priority).expect("priority");
    tx.execute(
        "INSERT OR REPLACE INTO bundles (bundle_id, source, destination, encrypted_payload, payload_hash,
            priority, created_at, ttl_s, custody, hop_list, status, security, fragment, route, delivered_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15)",
        params![
            b.bundle_id,
            b.source.as_str(),
            b.destination.as_str(),
            b.encrypted_payload,
            b.payload_hash,
            priority.as_str().unwrap_or_default(),
            ts(&b.created_at),
            i64::try_from(b.ttl_s).unwrap_or(i64::MAX),
            b.custody,
            json(&b.hop_list),
            b.status.as_str(),
            json(&b.security),
            b.fragment.as_ref().map(json),
            json(&rec.route),
            rec.delivered_at.as_ref().map(ts),
        ],
    )?;
    Ok(())
}

fn insert_transmission(tx: &Transaction, t: &TransmissionRecord) -> Result<u32, StoreError> {
    let prior: u32 = tx.query_row(
        "SELECT COUNT(*) FROM transmissions WHERE bundle_id = ?1 AND from_node = ?2",
        params![t.bundle_id, t.from],
        |r| r.get(0),
    )?;
    let attempt = prior + 1;
    tx.execute(
        "INSERT INTO transmissions (bundle_id, from_node, to_node, started_at, completed_at, outcome, attempt_number)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
        params![
            t.bundle_id,
            t.from,
            t.to,
            ts(&t.started_at),
            t.completed_at.as_ref().map(ts),
            t.outcome.as_str(),
            attempt
        ],
    )?;
    Ok(attempt)
}

fn insert_ack(tx: &Transaction, a: &AckMessage) -> Result<(), StoreError> {
    let kind = serde_json::to_value(a.kind).expect("kind");
    tx.execute(
        "INSERT INTO acks (kind, bundle_id, from_node, at) VALUES (?1, ?2, ?3, ?4)",
        params![kind.as_str().unwrap_or_default(), a.bundle_id, a.from, ts(&a.at)],
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::tests::make;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> StoredBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        StoredBundle {
            bundle: make(b"persist me", "london", Priority::Expedited, time::sim_epoch(), &mut rng),
            route: vec!["london".into(), "ISS".into()],
            delivered_at: None,
        }
    }

    #[test]
    fn roundtrip_and_update() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path().join("db.sqlite")).unwrap();
        let rec = sample();
        s.persist_bundle(&rec).unwrap();
        assert_eq!(s.load_bundle(&rec.bundle.bundle_id).unwrap(), rec);
        s.update_status(&rec.bundle.bundle_id, BundleStatus::Queued).unwrap();
        assert_eq!(s.load_bundle(&rec.bundle.bundle_id).unwrap().bundle.status, BundleStatus::Queued);
        assert!(matches!(s.load_bundle("nope"), Err(StoreError::NotFound(_))));
        assert!(matches!(s.update_status("nope", BundleStatus::Queued), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn migrate_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path().join("db.sqlite")).unwrap();
        assert_eq!(s.migrate().unwrap().version, SCHEMA_VERSION);
        assert_eq!(s.schema_history().unwrap().len(), 1);
    }

    #[test]
    fn attempts_count_per_sender() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path().join("db.sqlite")).unwrap();
        let t = TransmissionRecord {
            bundle_id: "b".into(),
            from: "toronto".into(),
            to: "ISS".into(),
            started_at: time::sim_epoch(),
            completed_at: None,
            outcome: Outcome::Nak,
            attempt_number: 0,
        };
        assert_eq!(s.record_transmission(&t).unwrap(), 1);
        assert_eq!(s.record_transmission(&t).unwrap(), 2);
        let other = TransmissionRecord {
            from: "ISS".into(),
            ..t
        };
        assert_eq!(s.record_transmission(&other).unwrap(), 1);
        assert_eq!(s.transmissions(Some("b")).unwrap().len(), 3);
    }
}
