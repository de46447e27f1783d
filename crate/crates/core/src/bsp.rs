//! Bundle security blocks: PCB (AES-256-CBC confidentiality), PIB (end-to-end
//! HMAC over the ciphertext hash) and BAB (per-hop HMAC over bundle metadata).
//!
//! All nodes share one secret. The AES/HMAC key is PBKDF2-HMAC-SHA256 of that
//! secret and is derived once per `(secret, salt, iterations)` per process.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

type Aes256CbcEnc = cbc::Encryptor<aes::Aes256>;
type Aes256CbcDec = cbc::Decryptor<aes::Aes256>;
type HmacSha256 = Hmac<Sha256>;

pub const DEFAULT_KDF_ITERATIONS: u32 = 100_000;
pub const DEFAULT_SALT: &[u8] = b"dtnsim-bsp-salt-v1";
pub const IV_LEN: usize = 16;
const BLOCK: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BspError {
    #[error("plaintext must not be empty")]
    EmptyPlaintext,
    #[error("invalid key config: {0}")]
    InvalidConfig(String),
    #[error("malformed base64 in {0}")]
    Encoding(&'static str),
    #[error("IV must be {IV_LEN} bytes")]
    InvalidIv,
    #[error("decryption failed (wrong key or corrupted ciphertext)")]
    Decrypt,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyConfig {
    pub shared_secret: Vec<u8>,
    pub salt: Vec<u8>,
    pub kdf_iterations: u32,
}

impl std::fmt::Debug for KeyConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyConfig")
            .field("shared_secret", &"<redacted>")
            .field("salt", &hex::encode(&self.salt))
            .field("kdf_iterations", &self.kdf_iterations)
            .finish()
    }
}

impl KeyConfig {
    pub fn new(shared_secret: impl Into<Vec<u8>>) -> Self {
        Self {
            shared_secret: shared_secret.into(),
            salt: DEFAULT_SALT.to_vec(),
            kdf_iterations: DEFAULT_KDF_ITERATIONS,
        }
    }

    pub fn validate(&self) -> Result<(), BspError> {
        if self.shared_secret.is_empty() {
            return Err(BspError::InvalidConfig("shared secret is empty".into()));
        }
        if self.kdf_iterations == 0 {
            return Err(BspError::InvalidConfig("kdf_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Derived 256-bit key. Cheap to clone.
#[derive(Clone, PartialEq, Eq)]
pub struct Key([u8; 32]);

impl std::fmt::Debug for Key {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Key(<redacted>)")
    }
}

impl Key {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Key(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("HMAC accepts any key length")
    }
}

type KdfCache = Mutex<HashMap<(Vec<u8>, Vec<u8>, u32), Key>>;

fn kdf_cache() -> &'static KdfCache {
    static CACHE: OnceLock<KdfCache> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// PBKDF2-HMAC-SHA256 with a 32-byte output. Repeated calls with the same
/// config return the cached key.
pub fn derive_key(cfg: &KeyConfig) -> Result<Key, BspError> {
    cfg.validate()?;
    let id = (cfg.shared_secret.clone(), cfg.salt.clone(), cfg.kdf_iterations);
    if let Some(k) = kdf_cache().lock().unwrap_or_else(|e| e.into_inner()).get(&id) {
        return Ok(k.clone());
    }
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(&cfg.shared_secret, &cfg.salt, cfg.kdf_iterations, &mut out);
    let key = Key(out);
    kdf_cache()
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(id, key.clone());
    Ok(key)
}

/// Result of encrypting a payload: IV and ciphertext, both base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pcb {
    pub iv: String,
    pub ciphertext: String,
}

impl Pcb {
    /// The block as carried in a bundle document. The ciphertext itself travels
    /// in the bundle's `encrypted_payload`.
    pub fn block(&self) -> PcbBlock {
        PcbBlock { iv: self.iv.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcbBlock {
    pub iv: String,
}

impl PcbBlock {
    pub fn with_ciphertext(&self, ciphertext: &str) -> Pcb {
        Pcb {
            iv: self.iv.clone(),
            ciphertext: ciphertext.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pib {
    pub signature: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bab {
    pub security_source: String,
    pub security_dest: String,
    pub signature: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityBlocks {
    pub pcb: PcbBlock,
    pub pib: Pib,
    #[serde(default)]
    pub bab: Option<Bab>,
}

pub fn pcb_encrypt<R: RngCore + ?Sized>(
    plaintext: &[u8],
    key: &Key,
    rng: &mut R,
) -> Result<Pcb, BspError> {
    if plaintext.is_empty() {
        return Err(BspError::EmptyPlaintext);
    }
    let mut iv = [0u8; IV_LEN];
    rng.fill_bytes(&mut iv);
    let ct = Aes256CbcEnc::new(key.as_bytes().into(), &iv.into())
        .encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    Ok(Pcb {
        iv: B64.encode(iv),
        ciphertext: B64.encode(ct),
    })
}

pub fn pcb_decrypt(pcb: &Pcb, key: &Key) -> Result<Vec<u8>, BspError> {
    let iv = B64.decode(&pcb.iv).map_err(|_| BspError::Encoding("iv"))?;
    let iv: [u8; IV_LEN] = iv.try_into().map_err(|_| BspError::InvalidIv)?;
    let ct = B64
        .decode(&pcb.ciphertext)
        .map_err(|_| BspError::Encoding("ciphertext"))?;
    if ct.is_empty() || ct.len() % BLOCK != 0 {
        return Err(BspError::Decrypt);
    }
    Aes256CbcDec::new(key.as_bytes().into(), &iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(&ct)
        .map_err(|_| BspError::Decrypt)
}

/// Length of the base64 ciphertext for a plaintext of `plaintext_len` bytes.
/// PKCS7 always adds at least one byte, so aligned inputs gain a full block.
pub fn encrypted_size(plaintext_len: usize) -> usize {
    let padded = BLOCK * (plaintext_len / BLOCK + 1);
    4 * padded.div_ceil(3)
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn hmac_hex(key: &Key, data: &[u8]) -> String {
    let mut mac = key.mac();
    mac.update(data);
    hex::encode(mac.finalize().into_bytes())
}

/// Constant-time check of a hex HMAC tag.
fn hmac_verify(key: &Key, data: &[u8], signature_hex: &str) -> bool {
    let Ok(tag) = hex::decode(signature_hex) else {
        return false;
    };
    // only canonical lowercase encodings are accepted
    if signature_hex.bytes().any(|b| b.is_ascii_uppercase()) {
        return false;
    }
    let mut mac = key.mac();
    mac.update(data);
    mac.verify_slice(&tag).is_ok()
}

/// Signs the SHA-256 hex of the base64 ciphertext.
pub fn pib_create(encrypted_payload_hash: &str, key: &Key) -> Pib {
    Pib {
        signature: hmac_hex(key, encrypted_payload_hash.as_bytes()),
    }
}

pub fn pib_verify(pib: &Pib, encrypted_payload_hash: &str, key: &Key) -> bool {
    hmac_verify(key, encrypted_payload_hash.as_bytes(), &pib.signature)
}

/// Fields a BAB covers. Implemented by bundles and fragments.
pub trait BabSubject {
    fn bundle_id(&self) -> &str;
    fn source(&self) -> &str;
    fn destination(&self) -> &str;
    fn payload_hash(&self) -> &str;
}

fn bab_message(subject: &dyn BabSubject, from: &str, to: &str) -> String {
    [
        subject.bundle_id(),
        subject.source(),
        subject.destination(),
        subject.payload_hash(),
        from,
        to,
    ]
    .join("|")
}

pub fn bab_create(subject: &dyn BabSubject, from: &str, to: &str, key: &Key) -> Result<Bab, BspError> {
    if from == to {
        return Err(BspError::InvalidConfig(format!("BAB hop {from} -> {to} is a self-loop")));
    }
    Ok(Bab {
        security_source: from.to_string(),
        security_dest: to.to_string(),
        signature: hmac_hex(key, bab_message(subject, from, to).as_bytes()),
    })
}

pub fn bab_verify(subject: &dyn BabSubject, bab: &Bab, key: &Key) -> bool {
    if bab.security_source == bab.security_dest {
        return false;
    }
    let msg = bab_message(subject, &bab.security_source, &bab.security_dest);
    hmac_verify(key, msg.as_bytes(), &bab.signature)
}

/// Plaintext lengths of the security overhead profile.
pub const PROFILE_SIZES: [usize; 9] = [64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub plaintext_bytes: usize,
    pub encrypted_bytes: usize,
    /// (encrypted - plaintext) / plaintext, in percent.
    pub overhead_pct: f64,
    pub encrypt_ms: f64,
    pub sign_ms: f64,
    pub total_ms: f64,
}

pub fn overhead_pct(plaintext_len: usize) -> f64 {
    (encrypted_size(plaintext_len) as f64 - plaintext_len as f64) / plaintext_len as f64 * 100.0
}

/// Encrypts and signs a random payload of each size `reps` times with an
/// already derived key and reports sizes and mean timings.
pub fn overhead_profile<R: RngCore + ?Sized>(
    key: &Key,
    sizes: &[usize],
    reps: usize,
    rng: &mut R,
) -> Result<Vec<OverheadRow>, BspError> {
    let reps = reps.max(1);
    sizes
        .iter()
        .map(|&n| {
            let mut plain = vec![0u8; n];
            rng.fill_bytes(&mut plain);
            let (mut enc, mut sign) = (0.0, 0.0);
            let mut len = 0;
            for _ in 0..reps {
                let t0 = std::time::Instant::now();
                let pcb = pcb_encrypt(&plain, key, rng)?;
                let t1 = std::time::Instant::now();
                let _pib = pib_create(&sha256_hex(pcb.ciphertext.as_bytes()), key);
                let t2 = std::time::Instant::now();
                enc += (t1 - t0).as_secs_f64();
                sign += (t2 - t1).as_secs_f64();
                len = pcb.ciphertext.len();
            }
            let (enc, sign) = (enc * 1e3 / reps as f64, sign * 1e3 / reps as f64);
            Ok(OverheadRow {
                plaintext_bytes: n,
                encrypted_bytes: len,
                overhead_pct: overhead_pct(n),
                encrypt_ms: enc,
                sign_ms: sign,
                total_ms: enc + sign,
            })
        })
        .collect()
}
