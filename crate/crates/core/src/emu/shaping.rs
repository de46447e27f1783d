use std::collections::BTreeMap;
use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::wire::{self, WireError, WireMessage};
use super::EmuError;

const CHUNK: usize = 256;
const MAX_WAIT: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapedLinkConfig {
    pub bandwidth_bps: f64,
    pub one_way_delay_ms: f64,
    pub loss_prob: f64,
    /// Rate while out of contact; small enough that transfers stall.
    pub down_bandwidth_bps: f64,
}

impl Default for ShapedLinkConfig {
    fn default() -> Self {
        Self::iss()
    }
}

impl ShapedLinkConfig {
    pub fn iss() -> Self {
        Self {
            bandwidth_bps: 56_000.0,
            one_way_delay_ms: 3.0,
            loss_prob: 0.0,
            down_bandwidth_bps: 8.0,
        }
    }

    pub fn ground() -> Self {
        Self {
            bandwidth_bps: 100e6,
            one_way_delay_ms: 1.0,
            loss_prob: 0.0,
            down_bandwidth_bps: 100e6,
        }
    }

    pub fn validate(&self) -> Result<(), EmuError> {
        if !(self.bandwidth_bps > 0.0 && self.down_bandwidth_bps > 0.0) {
            return Err(EmuError::Config("link bandwidths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(EmuError::Config(format!("loss_prob {} outside [0, 1]", self.loss_prob)));
        }
        if !(self.one_way_delay_ms >= 0.0) {
            return Err(EmuError::Config("one_way_delay_ms must be >= 0".into()));
        }
        Ok(())
    }

    pub fn delay(&self) -> Duration {
        Duration::from_secs_f64(self.one_way_delay_ms / 1e3)
    }
}

/// Current shaping of one undirected link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkShape {
    pub config: ShapedLinkConfig,
    pub up: bool,
}

impl LinkShape {
    pub fn rate_bps(&self) -> f64 {
        if self.up {
            self.config.bandwidth_bps
        } else {
            self.config.down_bandwidth_bps
        }
    }
}

/// Outcome of [`LinkTable::apply_link_state`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkEffect {
    Unchanged,
    Raised,
    Lowered,
    Updated,
}

/// Shared per-link shaping, read by senders on every chunk so a change takes
/// effect mid-transfer.
#[derive(Debug, Clone, Default)]
pub struct LinkTable {
    inner: Arc<RwLock<BTreeMap<(String, String), LinkShape>>>,
}

fn pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl LinkTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, a: &str, b: &str, config: ShapedLinkConfig, up: bool) {
        self.inner
            .write()
            .expect("link table lock")
            .insert(pair(a, b), LinkShape { config, up });
    }

    pub fn get(&self, a: &str, b: &str) -> Option<LinkShape> {
        self.inner.read().expect("link table lock").get(&pair(a, b)).copied()
    }

    pub fn is_up(&self, a: &str, b: &str) -> bool {
        self.get(a, b).is_some_and(|s| s.up)
    }

    /// Raises or lowers a configured link and sets its loss probability.
    /// Unknown pairs are left alone.
    pub fn apply_link_state(&self, a: &str, b: &str, visible: bool, loss_prob: f64) -> LinkEffect {
        let mut map = self.inner.write().expect("link table lock");
        let Some(shape) = map.get_mut(&pair(a, b)) else {
            return LinkEffect::Unchanged;
        };
        let effect = match (shape.up, visible) {
            (false, true) => LinkEffect::Raised,
            (true, false) => LinkEffect::Lowered,
            _ if shape.config.loss_prob != loss_prob => LinkEffect::Updated,
            _ => LinkEffect::Unchanged,
        };
        shape.up = visible;
        shape.config.loss_prob = loss_prob;
        effect
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SendReport {
    pub ok: bool,
    pub attempts: u32,
    /// First byte written to reply read, including both one-way delays.
    pub socket_rtt_ms: Option<f64>,
    pub error: Option<String>,
    pub bytes: usize,
}

impl SendReport {
    fn failed(bytes: usize, error: String, rtt: Option<f64>) -> Self {
        Self {
            ok: false,
            attempts: 1,
            socket_rtt_ms: rtt,
            error: Some(error),
            bytes,
        }
    }
}

/// Token bucket that starts empty and holds at most one chunk, so bytes
/// leave at exactly the configured rate.
#[derive(Debug)]
pub struct TokenBucket {
    tokens: f64,
    capacity: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(capacity_bytes: usize) -> Self {
        Self {
            tokens: 0.0,
            capacity: capacity_bytes as f64,
            last: Instant::now(),
        }
    }

    /// Takes `n` bytes if available at `rate_bps`, else returns how long to wait.
    pub fn take(&mut self, n: usize, rate_bps: f64) -> Result<(), Duration> {
        let now = Instant::now();
        let rate = rate_bps / 8.0;
        self.tokens = (self.tokens + rate * now.duration_since(self.last).as_secs_f64()).min(self.capacity);
        self.last = now;
        let need = n as f64;
        if self.tokens >= need {
            self.tokens -= need;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((need - self.tokens) / rate))
        }
    }
}

/// What to put on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Whole,
    /// Seeded loss: half the frame is written, then the connection is closed.
    Drop,
}

/// Sends one framed message over a fresh TCP connection shaped by the
/// `from`-`to` entry of `links`, then waits for the reply frame.
///
/// The deadline is `io_timeout` plus the serialization time at the link's
/// up rate; a starved (down) link therefore fails with a timeout.
pub fn shaped_send(
    addr: SocketAddr,
    links: &LinkTable,
    from: &str,
    to: &str,
    msg: &WireMessage,
    io_timeout: Duration,
    delivery: Delivery,
) -> (SendReport, Option<WireMessage>) {
    let body = msg.encode();
    let bytes = body.len() + 4;
    let Some(shape) = links.get(from, to) else {
        return (SendReport::failed(bytes, format!("no link {from}-{to}"), None), None);
    };
    let deadline = Instant::now() + io_timeout + Duration::from_secs_f64(bytes as f64 * 8.0 / shape.config.bandwidth_bps);
    let mut stream = match TcpStream::connect_timeout(&addr, io_timeout) {
        Ok(s) => s,
        Err(e) => return (SendReport::failed(bytes, format!("connect: {e}"), None), None),
    };
    let _ = stream.set_nodelay(true);
    let t0 = Instant::now();
    thread::sleep(shape.config.delay());
    let framed = wire::frame(&body);
    let limit = match delivery {
        Delivery::Whole => framed.len(),
        Delivery::Drop => framed.len() / 2,
    };
    let mut bucket = TokenBucket::new(CHUNK);
    let mut sent = 0;
    while sent < limit {
        let n = CHUNK.min(limit - sent);
        let rate = links.get(from, to).map_or(shape.config.down_bandwidth_bps, |s| s.rate_bps());
        match bucket.take(n, rate) {
            Ok(()) => {
                if let Err(e) = stream.write_all(&framed[sent..sent + n]) {
                    return (SendReport::failed(bytes, format!("write: {e}"), None), None);
                }
                sent += n;
            }
            Err(wait) => {
                let now = Instant::now();
                if now >= deadline {
                    return (SendReport::failed(bytes, "timeout: link stalled".into(), None), None);
                }
                thread::sleep(wait.min(MAX_WAIT).min(deadline - now));
            }
        }
    }
    if delivery == Delivery::Drop {
        let _ = stream.shutdown(Shutdown::Both);
        return (SendReport::failed(bytes, "frame lost in transit".into(), None), None);
    }
    let remaining = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
    let _ = stream.set_read_timeout(Some(remaining));
    let reply = match wire::read_frame(&mut stream) {
        Ok(body) => body,
        Err(WireError::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
            return (SendReport::failed(bytes, "timeout: no reply".into(), None), None)
        }
        Err(e) => return (SendReport::failed(bytes, format!("reply: {e}"), None), None),
    };
    thread::sleep(shape.config.delay());
    let rtt = t0.elapsed().as_secs_f64() * 1e3;
    match WireMessage::decode(&reply) {
        Ok(m) if m.is_ack() => (
            SendReport {
                ok: true,
                attempts: 1,
                socket_rtt_ms: Some(rtt),
                error: None,
                bytes,
            },
            Some(m),
        ),
        Ok(m) => {
            let reason = match &m {
                WireMessage::CustodyNak { reason, .. } => format!("nak: {reason}"),
                _ => "unexpected reply".to_string(),
            };
            (SendReport::failed(bytes, reason, Some(rtt)), Some(m))
        }
        Err(e) => (SendReport::failed(bytes, e.to_string(), Some(rtt)), None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_paces_at_rate() {
        // 708 bytes at 56 kbit/s = 0.10114 s
        let mut b = TokenBucket::new(CHUNK);
        let t0 = Instant::now();
        let mut left = 708;
        while left > 0 {
            let n = CHUNK.min(left);
            match b.take(n, 56_000.0) {
                Ok(()) => left -= n,
                Err(w) => thread::sleep(w),
            }
        }
        let dt = t0.elapsed().as_secs_f64();
        assert!((0.1011..0.16).contains(&dt), "{dt}");
    }

    #[test]
    fn link_state_toggles() {
        let t = LinkTable::new();
        t.set("ISS", "toronto", ShapedLinkConfig::iss(), false);
        assert_eq!(t.apply_link_state("toronto", "ISS", true, 0.1), LinkEffect::Raised);
        assert!(t.is_up("ISS", "toronto"));
        assert_eq!(t.get("ISS", "toronto").unwrap().config.loss_prob, 0.1);
        assert_eq!(t.apply_link_state("ISS", "toronto", true, 0.1), LinkEffect::Unchanged);
        assert_eq!(t.apply_link_state("ISS", "toronto", false, 0.1), LinkEffect::Lowered);
        assert_eq!(t.get("ISS", "toronto").unwrap().rate_bps(), 8.0);
        assert_eq!(t.apply_link_state("a", "b", true, 0.0), LinkEffect::Unchanged);
        assert!(t.get("a", "b").is_none());
    }

    #[test]
    fn config_validation() {
        assert!(ShapedLinkConfig::iss().validate().is_ok());
        let bad = ShapedLinkConfig {
            loss_prob: 1.5,
            ..ShapedLinkConfig::iss()
        };
        assert!(bad.validate().is_err());
    }
}
