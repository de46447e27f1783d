use chrono::Duration;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dtnsim::bsp::{self, BabSubject, Key};
use dtnsim::bundle::{create_bundle, BundleQueue, BundleRequest, BundleStatus, DtnBundle, Endpoint, Priority};
use dtnsim::fragment::{self, AcceptOutcome, FragmentConfig, ReassemblyBuffers};
use dtnsim::store::{Store, StoredBundle};
use dtnsim::time;

fn key() -> Key {
    Key::from_bytes([7; 32])
}

fn bundle(plain: &[u8], src: &str, priority: Priority, rng: &mut ChaCha8Rng) -> DtnBundle {
    create_bundle(
        BundleRequest {
            plaintext: plain,
            source: Endpoint::new(src).unwrap(),
            destination: Endpoint::iss(),
            priority,
            custody: true,
            ttl_s: 3600,
        },
        &key(),
        rng,
        time::sim_epoch(),
    )
    .unwrap()
}

/// Flips bit `bit` (0..7) of byte `idx % len`; stays ASCII for ASCII input.
fn flip(s: &str, idx: usize, bit: u8) -> String {
    let mut b = s.as_bytes().to_vec();
    let i = idx % b.len();
    b[i] ^= 1 << (bit % 7);
    String::from_utf8(b).unwrap()
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pcb_roundtrip(plain in prop::collection::vec(any::<u8>(), 1..4096), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pcb = bsp::pcb_encrypt(&plain, &key(), &mut rng).unwrap();
        prop_assert_eq!(pcb.ciphertext.len(), bsp::encrypted_size(plain.len()));
        prop_assert_eq!(bsp::pcb_decrypt(&pcb, &key()).unwrap(), plain);
    }

    #[test]
    fn pib_rejects_single_bit_mutations(
        data in prop::collection::vec(any::<u8>(), 1..512),
        idx in any::<usize>(),
        bit in 0u8..7,
        in_signature in any::<bool>(),
    ) {
        let hash = bsp::sha256_hex(&data);
        let pib = bsp::pib_create(&hash, &key());
        prop_assert!(bsp::pib_verify(&pib, &hash, &key()));
        if in_signature {
            let bad = bsp::Pib { signature: flip(&pib.signature, idx, bit) };
            prop_assert!(!bsp::pib_verify(&bad, &hash, &key()));
        } else {
            prop_assert!(!bsp::pib_verify(&pib, &flip(&hash, idx, bit), &key()));
        }
    }

    #[test]
    fn bab_rejects_single_bit_mutations(
        id in "[a-z0-9-]{1,24}",
        src in "[a-z_]{1,12}",
        dst in "[a-z_]{1,12}",
        data in prop::collection::vec(any::<u8>(), 1..256),
        from in "[a-z_]{1,12}",
        to in "[A-Z]{1,12}",
        field in 0usize..7,
        idx in any::<usize>(),
        bit in 0u8..7,
    ) {
        let subject = Fields([id, src, dst, bsp::sha256_hex(&data)]);
        let bab = bsp::bab_create(&subject, &from, &to, &key()).unwrap();
        prop_assert!(bsp::bab_verify(&subject, &bab, &key()));
        let mut s = Fields(subject.0.clone());
        let mut b = bab.clone();
        match field {
            0..=3 => s.0[field] = flip(&s.0[field], idx, bit),
            4 => b.security_source = flip(&b.security_source, idx, bit),
            5 => b.security_dest = flip(&b.security_dest, idx, bit),
            _ => b.signature = flip(&b.signature, idx, bit),
        }
        prop_assert!(!bsp::bab_verify(&s, &b, &key()));
    }

    #[test]
    fn queue_order_is_total(
        specs in prop::collection::vec((0u8..3, 0i64..5, "[a-z]{1,4}"), 1..24),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = bundle(b"q", "a", Priority::Normal, &mut rng);
        let mut items: Vec<DtnBundle> = Vec::new();
        for (i, (p, t, id)) in specs.iter().enumerate() {
            let mut b = template.clone();
            b.priority = [Priority::Bulk, Priority::Normal, Priority::Expedited][*p as usize];
            b.created_at = time::sim_epoch() + Duration::seconds(*t);
            // ids must be unique; the suffix keeps the generated prefix significant
            b.bundle_id = format!("{id}-{i:02}");
            items.push(b);
        }
        let drain = |order: &[DtnBundle]| {
            let mut q = BundleQueue::new();
            for b in order {
                q.enqueue(b.clone()).unwrap();
            }
            std::iter::from_fn(|| q.next_for_transmission()).map(|b| b.bundle_id).collect::<Vec<_>>()
        };
        let mut a = items.clone();
        let mut b = items.clone();
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        let first = drain(&a);
        prop_assert_eq!(&first, &drain(&b));
        let mut expected = items;
        expected.sort_by(|x, y| {
            y.priority
                .cmp(&x.priority)
                .then(x.created_at.cmp(&y.created_at))
                .then(x.bundle_id.cmp(&y.bundle_id))
        });
        prop_assert_eq!(first, expected.into_iter().map(|b| b.bundle_id).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn fragment_shuffle_roundtrip(len in 1usize..=65536, mtu in 1100usize..=8192, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plain = vec![0u8; len];
        rand::RngCore::fill_bytes(&mut rng, &mut plain);
        let parent = bundle(&plain, "london", Priority::Normal, &mut rng);
        let direct = parent.open(&key()).unwrap();
        let cfg = FragmentConfig { mtu, header_reserve: 1024 };
        let mut parts = fragment::maybe_fragment(&parent, cfg, &key()).unwrap();
        if parts.len() == 1 {
            prop_assert_eq!(parts[0].open(&key()).unwrap(), plain);
            return Ok(());
        }
        prop_assert_eq!(parts.len(), bsp::encrypted_size(len).div_ceil(mtu - 1024));
        parts.shuffle(&mut rng);
        let mut bufs = ReassemblyBuffers::new();
        let last = parts.len() - 1;
        for (i, p) in parts.iter().enumerate() {
            let out = fragment::accept_fragment(&mut bufs, p, &key(), time::sim_epoch()).unwrap();
            prop_assert_eq!(out, if i == last { AcceptOutcome::Complete } else { AcceptOutcome::Stored });
        }
        let buf = bufs.take(&parent.bundle_id).unwrap();
        let (rebuilt, out) = fragment::reassemble(&buf, &key()).unwrap();
        prop_assert_eq!(&out, &direct);
        prop_assert_eq!(out, plain);
        prop_assert_eq!(rebuilt.encrypted_payload, parent.encrypted_payload);
    }
}

fn stored_bundle() -> impl Strategy<Value = StoredBundle> {
    (
        prop::collection::vec(any::<u8>(), 1..256),
        prop::sample::select(vec!["toronto", "london", "tokyo", "ISS"]),
        0u8..3,
        any::<bool>(),
        0usize..5,
        prop::option::of(0i64..86_400_000),
        any::<u64>(),
        prop::sample::select(vec![
            BundleStatus::Created,
            BundleStatus::Queued,
            BundleStatus::InTransit,
            BundleStatus::Delivered,
            BundleStatus::Failed,
            BundleStatus::Expired,
        ]),
    )
        .prop_map(|(plain, src, p, custody, extra_hops, delivered_ms, seed, status)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prio = [Priority::Bulk, Priority::Normal, Priority::Expedited][p as usize];
            let mut b = bundle(&plain, src, prio, &mut rng);
            b.custody = custody;
            b.status = status;
            for i in 0..extra_hops {
                b.hop_list.push(format!("hop{i}"));
            }
            if seed % 3 == 0 {
                b.security.bab = Some(bsp::bab_create(&b, src, "relay", &key()).unwrap());
            }
            if seed % 4 == 0 {
                b = fragment::maybe_fragment(&b, FragmentConfig { mtu: 1100, header_reserve: 1024 }, &key())
                    .unwrap()
                    .pop()
                    .unwrap();
            }
            StoredBundle {
                route: b.hop_list.clone(),
                delivered_at: delivered_ms.map(|ms| time::sim_epoch() + Duration::milliseconds(ms)),
                bundle: b,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn store_roundtrip_is_identity(recs in prop::collection::vec(stored_bundle(), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("p.db")).unwrap();
        for r in &recs {
            store.persist_bundle(r).unwrap();
        }
        for r in &recs {
            prop_assert_eq!(&store.load_bundle(&r.bundle.bundle_id).unwrap(), r);
        }
    }
}
