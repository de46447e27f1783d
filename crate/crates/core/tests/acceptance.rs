//! Acceptance gate. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Lines go straight to stdout so they survive capture.

use std::io::Write;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dtnsim::bsp::{self, BabSubject, Key};
use dtnsim::bundle::{create_bundle, BundleQueue, BundleRequest, Endpoint, Priority, ISS};
use dtnsim::emu::{run_emulation, EmuSpec};
use dtnsim::fragment::{self, FragmentConfig, ReassemblyBuffers};
use dtnsim::linkbudget::{atmospheric_loss, capacity, doppler, fspl};
use dtnsim::sim::{run_scenario, Engine, ScenarioSpec};
use dtnsim::time;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

const SIZES: [(usize, usize, f64); 9] = [
    (64, 108, 68.8),
    (128, 192, 50.0),
    (256, 364, 42.2),
    (512, 704, 37.5),
    (1024, 1388, 35.5),
    (2048, 2752, 34.4),
    (4096, 5484, 33.9),
    (8192, 10944, 33.6),
    (16384, 21868, 33.5),
];

fn sizes() -> Check {
    let t0 = Instant::now();
    for (plain, enc, pct) in SIZES {
        ensure(bsp::encrypted_size(plain) == enc, || {
            format!("{plain} B -> {} (want {enc})", bsp::encrypted_size(plain))
        })?;
        let got = bsp::overhead_pct(plain);
        ensure((got - pct).abs() < 0.1, || format!("{plain} B overhead {got:.2}% (want {pct}%)"))?;
    }
    let dt = t0.elapsed().as_secs_f64();
    ensure(dt < 1.0, || format!("took {dt:.3} s"))?;
    Ok(format!("9/9 sizes exact, overhead within 0.1 pt, {:.1} ms", dt * 1e3))
}

fn timing() -> Check {
    let key = bsp::derive_key(&dtnsim::sim::KeySpec::default().key_config()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = bsp::overhead_profile(&key, &bsp::PROFILE_SIZES, 50, &mut rng).map_err(|e| e.to_string())?;
    let worst = rows.iter().map(|r| r.total_ms).fold(0.0, f64::max);
    ensure(worst <= 1.0, || format!("slowest size {worst:.3} ms"))?;
    Ok(format!("slowest mean encrypt+sign {worst:.3} ms (16 KB {:.3} ms)", rows[8].total_ms))
}

fn e1() -> Check {
    let t0 = Instant::now();
    let e = run_scenario(&ScenarioSpec::profile("E1").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let wall = t0.elapsed().as_secs_f64();
    let m = e.metrics();
    let lat = m.latency.clone().ok_or("no latencies")?;
    let hops = m.mean_hops.unwrap_or(0.0);
    ensure(m.bundles == 20 && m.delivery_ratio == 1.0, || format!("delivered {}/{}", m.delivered, m.bundles))?;
    ensure(m.retransmissions == 0 && m.naks == 0, || format!("retx {} naks {}", m.retransmissions, m.naks))?;
    ensure((1.5..=2.5).contains(&hops), || format!("mean hops {hops}"))?;
    ensure(lat.median_s < 10.0 && lat.max_s > 200.0, || {
        format!("median {:.1} s max {:.1} s", lat.median_s, lat.max_s)
    })?;
    ensure(wall < 30.0, || format!("wall {wall:.1} s"))?;
    Ok(format!(
        "20/20, retx 0, naks 0, hops {hops:.2}, median {:.1} s, max {:.1} s, wall {wall:.2} s",
        lat.median_s, lat.max_s
    ))
}

fn e4() -> Check {
    let spec = ScenarioSpec::profile("E4").map_err(|e| e.to_string())?;
    ensure(spec.mtu == 2048, || format!("mtu {}", spec.mtu))?;
    let mut parts = Vec::new();
    for (label, level) in spec.levels() {
        let e = run_scenario(&level).map_err(|e| e.to_string())?;
        let m = e.metrics();
        ensure(m.delivery_ratio == 1.0, || format!("{label}: delivered {}/{}", m.delivered, m.bundles))?;
        let mut min_frags = u32::MAX;
        for (id, rec) in e.records() {
            let plain = e.original_plaintext(id).ok_or("plaintext missing")?;
            let out = e.decrypt_at(ISS, id).map_err(|err| format!("{id}: {err}"))?;
            ensure(out == plain, || format!("{id}: plaintext differs"))?;
            let overhead = rec.encrypted_bytes - rec.plaintext_bytes;
            let delivered_ct = e.inbox(ISS).and_then(|i| i.get(id)).map(|d| d.bundle.encrypted_payload.len());
            ensure(
                overhead == bsp::encrypted_size(plain.len()) - plain.len()
                    && delivered_ct == Some(bsp::encrypted_size(plain.len())),
                || format!("{id}: overhead {overhead} B"),
            )?;
            if plain.len() >= 16 * 1024 {
                min_frags = min_frags.min(rec.fragments);
            }
        }
        parts.push(format!("{label} {}/{}", m.delivered, m.bundles));
        if min_frags != u32::MAX {
            ensure(min_frags >= 8, || format!("{label}: 16 KB bundle with {min_frags} fragments"))?;
            parts.push(format!("{min_frags} fragments per 16 KB bundle"));
        }
    }
    Ok(format!("{}, plaintext identical, overhead exact", parts.join(", ")))
}

fn e5() -> Check {
    let spec = ScenarioSpec::profile("E5").map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for (label, level) in spec.levels() {
        let m = run_scenario(&level).map_err(|e| e.to_string())?.metrics();
        let hops = m.mean_hops.unwrap_or(0.0);
        ensure(m.delivery_ratio == 1.0, || format!("{label}: delivered {}/{}", m.delivered, m.bundles))?;
        ensure((1.5..=2.5).contains(&hops), || format!("{label}: mean hops {hops}"))?;
        parts.push(format!("{}:{hops:.2}", m.bundles));
    }
    ensure(parts.len() == 5, || format!("{} levels", parts.len()))?;
    Ok(format!("all levels 100%, mean hops {}", parts.join(" ")))
}

fn emulation_losses() -> Check {
    let mut parts = Vec::new();
    let mut spec = EmuSpec::profile("E3").map_err(|e| e.to_string())?;
    spec.base_port = 0;
    let mut levels = spec.levels();
    let mut e8 = EmuSpec::profile("E8").map_err(|e| e.to_string())?;
    e8.base_port = 0;
    levels.extend(e8.levels());
    let losses: Vec<f64> = levels.iter().map(|(_, l)| l.loss).collect();
    ensure(losses[..5] == [0.0, 0.05, 0.1, 0.2, 0.3], || format!("E3 losses {losses:?}"))?;
    for (_, level) in levels {
        ensure(level.duration_s <= 600.0 && !level.always_up, || "budget or schedule".into())?;
        ensure((level.up_s, level.down_s) == (120.0, 180.0), || "schedule".into())?;
        let r = run_emulation(&level).map_err(|e| e.to_string())?;
        let m = &r.metrics;
        let label = format!("{}@{:.0}%", r.name, r.loss * 100.0);
        ensure(r.completed && m.delivery_ratio == 1.0, || {
            format!("{label}: delivered {}/{} in {:.1} s", m.delivered, m.bundles, r.wall_time_s)
        })?;
        ensure(r.sends_total >= m.delivered, || format!("{label}: {} sends", r.sends_total))?;
        let failed = (r.sends_total - r.sends_ok) as u32;
        ensure(m.retransmissions >= failed, || {
            format!("{label}: {failed} failed sends, {} retransmissions", m.retransmissions)
        })?;
        parts.push(format!("{label} {}/{} sends {:.0}s", r.sends_ok, r.sends_total, r.wall_time_s));
    }
    Ok(format!("100% at every level; {}", parts.join(", ")))
}

fn raw_vs_dtn() -> Check {
    let mut spec = EmuSpec::profile("E7").map_err(|e| e.to_string())?;
    spec.base_port = 0;
    let r = run_emulation(&spec).map_err(|e| e.to_string())?;
    ensure(r.raw.len() == 5 && r.raw.iter().all(|a| !a.link_up), || "raw attempts not all in down windows".into())?;
    ensure(r.raw_delivered() == 0, || format!("raw {}/5 succeeded", r.raw_delivered()))?;
    ensure(r.metrics.bundles == 1 && r.metrics.delivered == 1, || "custody bundle not delivered".into())?;
    let lat = r.metrics.latency.as_ref().map_or(0.0, |l| l.max_s);
    Ok(format!("raw 0/5, DTN bundle delivered after {lat:.1} s"))
}

struct Fields([String; 4]);

impl BabSubject for Fields {
    fn bundle_id(&self) -> &str {
        &self.0[0]
    }
    fn source(&self) -> &str {
        &self.0[1]
    }
    fn destination(&self) -> &str {
        &self.0[2]
    }
    fn payload_hash(&self) -> &str {
        &self.0[3]
    }
}

fn flip(s: &str, idx: usize, bit: u8) -> String {
    let mut b = s.as_bytes().to_vec();
    let i = idx % b.len();
    b[i] ^= 1 << (bit % 7);
    String::from_utf8(b).unwrap()
}

fn run_prop<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn crypto_props() -> Check {
    let key = Key::from_bytes([9; 32]);
    let k = &key;
    run_prop(1000, (prop::collection::vec(any::<u8>(), 1..4096), any::<u64>()), |(plain, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pcb = bsp::pcb_encrypt(&plain, k, &mut rng).unwrap();
        prop_assert_eq!(bsp::pcb_decrypt(&pcb, k).unwrap(), plain);
        Ok(())
    })
    .map_err(|e| format!("pcb: {e}"))?;

    run_prop(
        1000,
        (prop::collection::vec(any::<u8>(), 1..256), 0usize..8, any::<usize>(), 0u8..7),
        |(data, field, idx, bit)| {
            let hash = bsp::sha256_hex(&data);
            let subject = Fields(["b-1".into(), "toronto".into(), "ISS".into(), hash.clone()]);
            if field == 7 {
                let pib = bsp::pib_create(&hash, k);
                prop_assert!(!bsp::pib_verify(&pib, &flip(&hash, idx, bit), k));
                let bad = bsp::Pib {
                    signature: flip(&pib.signature, idx, bit),
                };
                prop_assert!(!bsp::pib_verify(&bad, &hash, k));
                return Ok(());
            }
            let bab = bsp::bab_create(&subject, "toronto", "ISS", k).unwrap();
            let (mut s, mut b) = (Fields(subject.0.clone()), bab.clone());
            match field {
                0..=3 => s.0[field] = flip(&s.0[field], idx, bit),
                4 => b.security_source = flip(&b.security_source, idx, bit),
                5 => b.security_dest = flip(&b.security_dest, idx, bit),
                _ => b.signature = flip(&b.signature, idx, bit),
            }
            prop_assert!(!bsp::bab_verify(&s, &b, k));
            Ok(())
        },
    )
    .map_err(|e| format!("pib/bab: {e}"))?;

    run_prop(500, (1usize..=65536, 1100usize..=8192, any::<u64>()), |(len, mtu, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plain = vec![0u8; len];
        rand::RngCore::fill_bytes(&mut rng, &mut plain);
        let parent = make(&plain, Priority::Normal, k, &mut rng);
        let mut parts = fragment::maybe_fragment(&parent, FragmentConfig { mtu, header_reserve: 1024 }, k).unwrap();
        if parts.len() == 1 {
            prop_assert_eq!(parts[0].open(k).unwrap(), plain);
            return Ok(());
        }
        parts.shuffle(&mut rng);
        let mut bufs = ReassemblyBuffers::new();
        for p in &parts {
            fragment::accept_fragment(&mut bufs, p, k, time::sim_epoch()).unwrap();
        }
        let (_, out) = fragment::reassemble(&bufs.take(&parent.bundle_id).unwrap(), k).unwrap();
        prop_assert_eq!(out, plain);
        Ok(())
    })
    .map_err(|e| format!("fragments: {e}"))?;

    run_prop(1000, (prop::collection::vec((0usize..3, 0i64..5), 1..20), any::<u64>()), |(specs, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = make(b"q", Priority::Normal, k, &mut rng);
        let items: Vec<_> = specs
            .iter()
            .enumerate()
            .map(|(i, (p, t))| {
                let mut b = template.clone();
                b.priority = [Priority::Bulk, Priority::Normal, Priority::Expedited][*p];
                b.created_at = time::sim_epoch() + chrono::Duration::seconds(*t);
                b.bundle_id = format!("id-{:02}", (i * 7) % 97);
                b
            })
            .collect();
        let mut orders = Vec::new();
        for _ in 0..2 {
            let mut perm = items.clone();
            perm.shuffle(&mut rng);
            let mut q = BundleQueue::new();
            for b in perm {
                q.enqueue(b).unwrap();
            }
            orders.push(std::iter::from_fn(|| q.next_for_transmission()).map(|b| b.bundle_id).collect::<Vec<_>>());
        }
        prop_assert_eq!(&orders[0], &orders[1]);
        Ok(())
    })
    .map_err(|e| format!("queue: {e}"))?;
    Ok("pcb 1000, pib/bab mutations 1000, fragment shuffle 500, queue order 1000".into())
}

fn make(plain: &[u8], priority: Priority, key: &Key, rng: &mut ChaCha8Rng) -> dtnsim::bundle::DtnBundle {
    create_bundle(
        BundleRequest {
            plaintext: plain,
            source: Endpoint::new("london").unwrap(),
            destination: Endpoint::iss(),
            priority,
            custody: true,
            ttl_s: 3600,
        },
        key,
        rng,
        time::sim_epoch(),
    )
    .unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

fn link_budget() -> Check {
    let tol = 1e-9;
    let mut n = 0;
    let mut check = |name: &str, a: f64, b: f64| {
        n += 1;
        ensure(rel(a, b) < tol, || format!("{name}: {a} vs {b}"))
    };
    for l0 in [0.3, 0.5, 2.0] {
        check("zenith", atmospheric_loss(90.0, l0), l0)?;
        check("30 deg", atmospheric_loss(30.0, l0), 2.0 * l0)?;
    }
    for d in [1.0, 500.0, 2000.0] {
        let step = fspl(10.0 * d, 437.8).unwrap() - fspl(d, 437.8).unwrap();
        check("fspl decade", step, 20.0)?;
    }
    check("capacity snr 1", capacity(25_000.0, 0.0), 25_000.0)?;
    check("capacity snr 3", capacity(25_000.0, 10.0 * 3f64.log10()), 50_000.0)?;
    check("doppler zero", doppler(437.8, 0.0), 0.0)?;
    for v in [0.5, 7.66] {
        check("doppler odd", doppler(437.8, -v), -doppler(437.8, v))?;
    }
    Ok(format!("{n} oracle checks within 1e-9"))
}

fn determinism() -> Check {
    let mut parts = Vec::new();
    for p in ["E1", "E4"] {
        let spec = ScenarioSpec::profile(p).map_err(|e| e.to_string())?;
        for (label, level) in spec.levels() {
            let label = if label.is_empty() { p.to_string() } else { label };
            let trace = || -> Result<String, String> {
                let mut e = Engine::from_spec(&level).map_err(|e| e.to_string())?;
                e.run_to_completion().map_err(|e| e.to_string())?;
                Ok(e.trace_text() + &e.metrics().traces_csv())
            };
            let (a, b) = (trace()?, trace()?);
            ensure(a == b, || format!("{label}: traces differ"))?;
            ensure(!a.is_empty(), || format!("{label}: empty trace"))?;
            parts.push(format!("{label} {} B", a.len()));
        }
    }
    Ok(format!("byte-identical: {}", parts.join(", ")))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("encrypted sizes and overhead", sizes),
        ("encrypt+sign timing", timing),
        ("baseline scenario (E1)", e1),
        ("fragmentation (E4)", e4),
        ("scalability (E5)", e5),
        ("emulation loss sweep (E3/E8)", emulation_losses),
        ("raw vs DTN custody (E7)", raw_vs_dtn),
        ("crypto property suite", crypto_props),
        ("link-budget oracles", link_budget),
        ("deterministic traces", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let res = f();
        let secs = t0.elapsed().as_secs_f64();
        let line = match &res {
            Ok(detail) => format!("PASS [{}] {name}: {detail} ({secs:.1} s)", i + 1),
            Err(why) => format!("FAIL [{}] {name}: {why} ({secs:.1} s)", i + 1),
        };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        if res.is_err() {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
