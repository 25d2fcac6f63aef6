//! On-disk persistence for accounts plus sealing of upstream secrets.
//!
//! The store is a single UTF-8 JSON document:
//!
//! ```json
//! {
//!   "version": 1,
//!   "accounts": [
//!     {
//!       "email": "person@gmail.com",
//!       "upstream": { "host": "imap.example", "port": 993, "use_tls": true,
//!                     "upstream_login": "person@gmail.com", "sealed_password": "<hex>" },
//!       "owner_credential": { "kdf": { ... }, "salt": "<hex>", "hash": "<hex>" },
//!       "subusers": [ { "name": "spouse", "credential": { ... }, "policy": { ... }, "readonly": true } ],
//!       "lists": [ { "name": "listblack", "members": ["ex@gmail.com"] } ]
//!     }
//!   ]
//! }
//! ```
//!
//! Binary fields are lowercase hex. Files with an unknown version, unknown
//! fields, or violated invariants are rejected whole.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::credstore::AccountRecord;

pub const STORE_VERSION: u32 = 1;
pub const NONCE_LEN: usize = 12;
pub const MASTER_KEY_ENV: &str = "CHAMAIL_MASTER_KEY";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("store file is corrupt: {0}")]
    Corrupt(String),
    #[error("unsupported store version {0} (expected {STORE_VERSION})")]
    UnsupportedVersion(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("decryption failed")]
pub struct DecryptFailed;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MasterKeyError {
    #[error("{MASTER_KEY_ENV} is not set")]
    Missing,
    #[error("master key must be 64 hex characters")]
    Malformed,
}

/// Serialized form of the whole store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreFile {
    pub version: u32,
    pub accounts: Vec<AccountRecord>,
}

impl Default for StoreFile {
    fn default() -> Self {
        StoreFile {
            version: STORE_VERSION,
            accounts: Vec::new(),
        }
    }
}

impl StoreFile {
    pub fn account(&self, email: &str) -> Option<&AccountRecord> {
        let email = email.trim().to_ascii_lowercase();
        self.accounts.iter().find(|a| a.email.as_str() == email)
    }

    pub fn account_mut(&mut self, email: &str) -> Option<&mut AccountRecord> {
        let email = email.trim().to_ascii_lowercase();
        self.accounts.iter_mut().find(|a| a.email.as_str() == email)
    }

    pub fn to_json(&self) -> String {
        // AccountRecord contains only plain data; serialization cannot fail.
        serde_json::to_string_pretty(self).expect("store serialization")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, StoreError> {
        let probe: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        match probe.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(STORE_VERSION) => {}
            Some(v) => return Err(StoreError::UnsupportedVersion(v as u32)),
            None => return Err(StoreError::Corrupt("missing version field".into())),
        }
        let file: StoreFile =
            serde_json::from_value(probe).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        crate::credstore::validate_store(&file).map_err(StoreError::Corrupt)?;
        Ok(file)
    }
}

/// Loads a store file. A missing file is reported as `Io(NotFound)`.
pub fn load(path: &Path) -> Result<StoreFile, StoreError> {
    let bytes = fs::read(path)?;
    StoreFile::from_json(&bytes)
}

/// Loads a store file, or returns an empty store when the file does not exist.
pub fn load_or_default(path: &Path) -> Result<StoreFile, StoreError> {
    match load(path) {
        Err(StoreError::Io(e)) if e.kind() == io::ErrorKind::NotFound => Ok(StoreFile::default()),
        other => other,
    }
}

/// Writes `state` to a temporary file next to `path`, syncs it, then renames
/// it over `path`. On any error the previous file is left untouched.
pub fn save_atomic(state: &StoreFile, path: &Path) -> Result<(), StoreError> {
    save_atomic_with(state, path, |_| Ok(()))
}

/// Same as [`save_atomic`], with a hook that runs after the temporary file is
/// durable and before the rename. Returning an error from the hook aborts the
/// save exactly like a crash at that point would.
#[doc(hidden)]
pub fn save_atomic_with(
    state: &StoreFile,
    path: &Path,
    before_rename: impl FnOnce(&Path) -> io::Result<()>,
) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::Builder::new()
        .prefix(".chamail-store")
        .suffix(".tmp")
        .tempfile_in(&dir)?;
    tmp.write_all(state.to_json().as_bytes())?;
    tmp.write_all(b"\n")?;
    tmp.as_file().sync_all()?;
    before_rename(tmp.path())?;
    tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
    if let Ok(d) = File::open(&dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

/// Exclusive advisory lock held for the duration of a store mutation.
#[derive(Debug)]
pub struct StoreLock {
    _file: File,
}

impl StoreLock {
    pub fn exclusive(store_path: &Path) -> io::Result<Self> {
        let mut lock_path = store_path.as_os_str().to_owned();
        lock_path.push(".lock");
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(PathBuf::from(lock_path))?;
        file.lock()?;
        Ok(StoreLock { _file: file })
    }
}

/// 32-byte service key used to seal upstream passwords.
#[derive(Clone)]
pub struct MasterKey(Zeroizing<[u8; 32]>);

impl std::fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("MasterKey(..)")
    }
}

impl MasterKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        MasterKey(Zeroizing::new(bytes))
    }

    pub fn from_hex(text: &str) -> Result<Self, MasterKeyError> {
        let text = text.trim();
        if text.len() != 64 {
            return Err(MasterKeyError::Malformed);
        }
        let mut key = Zeroizing::new([0u8; 32]);
        hex::decode_to_slice(text, &mut key[..]).map_err(|_| MasterKeyError::Malformed)?;
        Ok(MasterKey(key))
    }

    pub fn from_env() -> Result<Self, MasterKeyError> {
        let value = Zeroizing::new(std::env::var(MASTER_KEY_ENV).map_err(|_| MasterKeyError::Missing)?);
        Self::from_hex(&value)
    }

    pub fn generate() -> Self {
        let mut key = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut key);
        MasterKey::from_bytes(key)
    }
}

/// AEAD ciphertext: 12-byte nonce followed by AES-256-GCM output.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SealedSecret(#[serde(with = "hex::serde")] pub Vec<u8>);

impl std::fmt::Debug for SealedSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SealedSecret({} bytes)", self.0.len())
    }
}

pub fn seal(plaintext: &[u8], key: &MasterKey) -> SealedSecret {
    let cipher = Aes256Gcm::new_from_slice(&key.0[..]).expect("32-byte key");
    let mut nonce = [0u8; NONCE_LEN];
    rand::thread_rng().fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .expect("AES-GCM encryption of in-memory buffer");
    let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    SealedSecret(out)
}

pub fn open(sealed: &SealedSecret, key: &MasterKey) -> Result<Zeroizing<Vec<u8>>, DecryptFailed> {
    if sealed.0.len() < NONCE_LEN + 16 {
        return Err(DecryptFailed);
    }
    let (nonce, ct) = sealed.0.split_at(NONCE_LEN);
    let cipher = Aes256Gcm::new_from_slice(&key.0[..]).expect("32-byte key");
    cipher
        .decrypt(Nonce::from_slice(nonce), ct)
        .map(Zeroizing::new)
        .map_err(|_| DecryptFailed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seal_round_trip_and_nondeterminism() {
        let k = MasterKey::generate();
        let a = seal(b"appleball", &k);
        let b = seal(b"appleball", &k);
        assert_ne!(a, b);
        assert_eq!(&open(&a, &k).unwrap()[..], b"appleball");
        assert_eq!(&open(&b, &k).unwrap()[..], b"appleball");
    }

    #[test]
    fn wrong_key_and_tamper_fail() {
        let k = MasterKey::generate();
        let other = MasterKey::generate();
        let s = seal(b"secret", &k);
        assert_eq!(open(&s, &other), Err(DecryptFailed));
        for bit in 0..s.0.len() * 8 {
            let mut t = s.clone();
            t.0[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(open(&t, &k), Err(DecryptFailed), "bit {bit}");
        }
        assert_eq!(open(&SealedSecret(vec![0; 5]), &k), Err(DecryptFailed));
    }

    #[test]
    fn master_key_parsing() {
        assert!(MasterKey::from_hex(&"ab".repeat(32)).is_ok());
        assert_eq!(MasterKey::from_hex("abc").unwrap_err(), MasterKeyError::Malformed);
        assert_eq!(
            MasterKey::from_hex(&"zz".repeat(32)).unwrap_err(),
            MasterKeyError::Malformed
        );
    }

    #[test]
    fn version_and_corruption_rejected() {
        assert!(matches!(
            StoreFile::from_json(br#"{"version": 7, "accounts": []}"#),
            Err(StoreError::UnsupportedVersion(7))
        ));
        assert!(matches!(
            StoreFile::from_json(br#"{"accounts": []}"#),
            Err(StoreError::Corrupt(_))
        ));
        assert!(matches!(
            StoreFile::from_json(br#"{"version": 1, "accounts": [{"email": "#),
            Err(StoreError::Corrupt(_))
        ));
        assert_eq!(
            StoreFile::from_json(br#"{"version": 1, "accounts": []}"#).unwrap(),
            StoreFile::default()
        );
    }

    #[test]
    fn missing_file_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.json");
        assert!(matches!(load(&p), Err(StoreError::Io(_))));
        assert_eq!(load_or_default(&p).unwrap(), StoreFile::default());
    }
}
