//! Accounts, sub-users, address lists and password credentials.
//!
//! A login carries only `(email, password)`, so every password on an account
//! must resolve to exactly one principal. Collisions are rejected when a
//! sub-user is added rather than at login time.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use argon2::{Algorithm, Argon2, Params, Version};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use zeroize::Zeroizing;

use crate::address::Address;
use crate::policy::{self, InvalidPolicy, PolicySet};
use crate::store::{self, MasterKey, SealedSecret, StoreError, StoreFile};

pub const MAX_SUBUSERS: usize = 16;
pub const MAX_NAME_CHARS: usize = 64;
pub const MIN_PASSWORD_CHARS: usize = 8;
pub const MAX_PASSWORD_CHARS: usize = 128;
pub const SALT_LEN: usize = 16;
pub const HASH_LEN: usize = 32;

/// Who a session runs as.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Principal {
    Owner,
    SubUser(String),
}

#[derive(Debug, thiserror::Error)]
pub enum CredError {
    #[error("account already exists")]
    DuplicateAccount,
    #[error("no such account")]
    UnknownAccount,
    #[error("password must be {MIN_PASSWORD_CHARS}-{MAX_PASSWORD_CHARS} characters")]
    WeakPassword,
    #[error(transparent)]
    InvalidAddress(#[from] crate::address::InvalidAddress),
    #[error("invalid name {0:?}: use 1-{MAX_NAME_CHARS} of A-Z a-z 0-9 . _ -")]
    InvalidName(String),
    #[error("invalid upstream: {0}")]
    InvalidUpstream(String),
    #[error("sub-user already exists")]
    DuplicateSubUser,
    #[error("no such sub-user")]
    UnknownSubUser,
    #[error("password is already in use on this account")]
    PasswordCollision,
    #[error("an account may have at most {MAX_SUBUSERS} sub-users")]
    SubUserLimit,
    #[error(transparent)]
    InvalidPolicy(#[from] InvalidPolicy),
    #[error("no such list")]
    UnknownList,
    #[error("list already exists")]
    DuplicateList,
    #[error("list is referenced by a sub-user policy")]
    ListInUse,
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Login failure. Deliberately carries no detail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("authentication failed")]
pub struct AuthFailed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdfAlgorithm {
    Argon2id,
}

/// Memory-hard KDF settings, stored with each credential so they can be
/// raised later without invalidating existing records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdfParams {
    pub algorithm: KdfAlgorithm,
    pub memory_kib: u32,
    pub time_cost: u32,
    pub parallelism: u32,
}

impl KdfParams {
    /// Roughly tens of milliseconds per hash on current hardware.
    pub const RECOMMENDED: KdfParams = KdfParams {
        algorithm: KdfAlgorithm::Argon2id,
        memory_kib: 19 * 1024,
        time_cost: 2,
        parallelism: 1,
    };

    /// Smallest legal cost. Only for tests and fixtures.
    pub const MINIMAL: KdfParams = KdfParams {
        algorithm: KdfAlgorithm::Argon2id,
        memory_kib: 8,
        time_cost: 1,
        parallelism: 1,
    };

    fn hasher(&self) -> Option<Argon2<'static>> {
        let params = Params::new(
            self.memory_kib,
            self.time_cost,
            self.parallelism,
            Some(HASH_LEN),
        )
        .ok()?;
        Some(Argon2::new(Algorithm::Argon2id, Version::V0x13, params))
    }
}

impl Default for KdfParams {
    fn default() -> Self {
        KdfParams::RECOMMENDED
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CredentialRecord {
    pub kdf: KdfParams,
    #[serde(with = "hex::serde")]
    pub salt: [u8; SALT_LEN],
    #[serde(with = "hex::serde")]
    pub hash: [u8; HASH_LEN],
}

impl std::fmt::Debug for CredentialRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CredentialRecord").field("kdf", &self.kdf).finish_non_exhaustive()
    }
}

impl CredentialRecord {
    pub fn create(password: &str, kdf: KdfParams) -> Self {
        let mut salt = [0u8; SALT_LEN];
        rand::thread_rng().fill_bytes(&mut salt);
        let hash = derive(password, &salt, &kdf).expect("valid KDF parameters");
        CredentialRecord {
            kdf,
            salt,
            hash: *hash,
        }
    }

    pub fn verify(&self, password: &str) -> bool {
        match derive(password, &self.salt, &self.kdf) {
            Some(h) => bool::from(h.ct_eq(&self.hash)),
            None => false,
        }
    }
}

fn derive(password: &str, salt: &[u8], kdf: &KdfParams) -> Option<Zeroizing<[u8; HASH_LEN]>> {
    let mut out = Zeroizing::new([0u8; HASH_LEN]);
    kdf.hasher()?
        .hash_password_into(password.as_bytes(), salt, &mut out[..])
        .ok()?;
    Some(out)
}

/// Plaintext upstream settings as supplied by the operator.
#[derive(Clone)]
pub struct UpstreamSpec {
    pub host: String,
    pub port: u16,
    pub use_tls: bool,
    pub upstream_login: String,
    pub password: Zeroizing<String>,
}

impl std::fmt::Debug for UpstreamSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UpstreamSpec")
            .field("host", &self.host)
            .field("port", &self.port)
            .field("use_tls", &self.use_tls)
            .field("upstream_login", &self.upstream_login)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamTarget {
    pub host: String,
    pub port: u16,
    pub use_tls: bool,
    pub upstream_login: String,
    pub sealed_password: SealedSecret,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddressList {
    pub name: String,
    pub members: BTreeSet<Address>,
}

impl AddressList {
    pub fn new(name: &str) -> Self {
        AddressList {
            name: name.to_string(),
            members: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, addr: Address) -> bool {
        self.members.insert(addr)
    }

    pub fn contains(&self, addr: &Address) -> bool {
        self.members.contains(addr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubUserRecord {
    pub name: String,
    pub credential: CredentialRecord,
    pub policy: PolicySet,
    pub readonly: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountRecord {
    pub email: Address,
    pub upstream: UpstreamTarget,
    pub owner_credential: CredentialRecord,
    pub subusers: Vec<SubUserRecord>,
    pub lists: Vec<AddressList>,
}

impl AccountRecord {
    pub fn subuser(&self, name: &str) -> Option<&SubUserRecord> {
        self.subusers.iter().find(|s| s.name == name)
    }

    pub fn list(&self, name: &str) -> Option<&AddressList> {
        self.lists.iter().find(|l| l.name == name)
    }

    /// The policy governing `principal`, or `None` for the owner and for a
    /// sub-user that no longer exists.
    pub fn policy_for(&self, principal: &Principal) -> Option<&PolicySet> {
        match principal {
            Principal::Owner => None,
            Principal::SubUser(name) => self.subuser(name).map(|s| &s.policy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ListAction {
    Create,
    Delete,
    AddMember(String),
    RemoveMember(String),
}

fn check_password(password: &str) -> Result<(), CredError> {
    let n = password.chars().count();
    if (MIN_PASSWORD_CHARS..=MAX_PASSWORD_CHARS).contains(&n) {
        Ok(())
    } else {
        Err(CredError::WeakPassword)
    }
}

pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.chars().count() <= MAX_NAME_CHARS
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn check_name(name: &str) -> Result<(), CredError> {
    if is_valid_name(name) {
        Ok(())
    } else {
        Err(CredError::InvalidName(name.to_string()))
    }
}

fn check_upstream(host: &str, port: u16, login: &str) -> Result<(), CredError> {
    if host.is_empty() || host.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(CredError::InvalidUpstream(format!("bad host {host:?}")));
    }
    if port == 0 {
        return Err(CredError::InvalidUpstream("port must be 1-65535".into()));
    }
    if login.is_empty() || login.contains(['\r', '\n', '\0']) {
        return Err(CredError::InvalidUpstream("bad upstream login".into()));
    }
    Ok(())
}

/// Checks every structural invariant of a loaded store.
pub fn validate_store(file: &StoreFile) -> Result<(), String> {
    let mut emails = HashSet::new();
    for acct in &file.accounts {
        if !emails.insert(acct.email.as_str()) {
            return Err(format!("duplicate account {}", acct.email));
        }
        let up = &acct.upstream;
        check_upstream(&up.host, up.port, &up.upstream_login)
            .map_err(|e| format!("{}: {e}", acct.email))?;
        if acct.subusers.len() > MAX_SUBUSERS {
            return Err(format!("{}: too many sub-users", acct.email));
        }
        let mut lists = HashSet::new();
        for l in &acct.lists {
            if !is_valid_name(&l.name) || !lists.insert(l.name.as_str()) {
                return Err(format!("{}: bad or duplicate list {:?}", acct.email, l.name));
            }
        }
        let mut names = HashSet::new();
        for s in &acct.subusers {
            if !is_valid_name(&s.name) || !names.insert(s.name.as_str()) {
                return Err(format!("{}: bad or duplicate sub-user {:?}", acct.email, s.name));
            }
            if !s.readonly {
                return Err(format!("{}: sub-user {} is not read-only", acct.email, s.name));
            }
            policy::validate(&s.policy, &acct.lists)
                .map_err(|e| format!("{}: sub-user {}: {e}", acct.email, s.name))?;
        }
        let creds = std::iter::once(&acct.owner_credential).chain(acct.subusers.iter().map(|s| &s.credential));
        for c in creds {
            if c.kdf.hasher().is_none() {
                return Err(format!("{}: invalid KDF parameters", acct.email));
            }
        }
    }
    Ok(())
}

fn dummy_credential() -> &'static CredentialRecord {
    static DUMMY: OnceLock<CredentialRecord> = OnceLock::new();
    DUMMY.get_or_init(|| CredentialRecord::create("chamail-dummy-credential", KdfParams::RECOMMENDED))
}

/// Resolves a login to a principal.
///
/// Every credential of the account is verified on every attempt, owner first
/// and then sub-users in stored order, so the work done does not depend on
/// which credential (if any) matched. Unknown accounts burn one verification.
pub fn authenticate(state: &StoreFile, email: &str, password: &str) -> Result<Principal, AuthFailed> {
    let Some(acct) = state.account(email) else {
        let _ = dummy_credential().verify(password);
        return Err(AuthFailed);
    };
    let owner = acct.owner_credential.verify(password);
    let matches: Vec<bool> = acct
        .subusers
        .iter()
        .map(|s| s.credential.verify(password))
        .collect();
    if owner {
        return Ok(Principal::Owner);
    }
    matches
        .iter()
        .position(|m| *m)
        .map(|i| Principal::SubUser(acct.subusers[i].name.clone()))
        .ok_or(AuthFailed)
}

/// Mutable handle over a store, persisting every change before returning.
#[derive(Debug)]
pub struct CredStore {
    state: StoreFile,
    path: Option<PathBuf>,
    kdf: KdfParams,
}

impl CredStore {
    /// An unpersisted store, mostly for tests.
    pub fn in_memory(kdf: KdfParams) -> Self {
        CredStore {
            state: StoreFile::default(),
            path: None,
            kdf,
        }
    }

    /// Opens the store at `path`, starting empty if the file does not exist.
    pub fn open(path: &Path, kdf: KdfParams) -> Result<Self, CredError> {
        Ok(CredStore {
            state: store::load_or_default(path)?,
            path: Some(path.to_path_buf()),
            kdf,
        })
    }

    pub fn state(&self) -> &StoreFile {
        &self.state
    }

    pub fn account(&self, email: &str) -> Option<&AccountRecord> {
        self.state.account(email)
    }

    pub fn authenticate(&self, email: &str, password: &str) -> Result<Principal, AuthFailed> {
        authenticate(&self.state, email, password)
    }

    fn mutate<T>(
        &mut self,
        f: impl FnOnce(&mut StoreFile, KdfParams) -> Result<T, CredError>,
    ) -> Result<T, CredError> {
        let mut next = self.state.clone();
        let out = f(&mut next, self.kdf)?;
        if let Some(path) = &self.path {
            store::save_atomic(&next, path)?;
        }
        self.state = next;
        Ok(out)
    }

    pub fn create_account(
        &mut self,
        email: &str,
        upstream: &UpstreamSpec,
        owner_password: &str,
        key: &MasterKey,
    ) -> Result<AccountRecord, CredError> {
        let email = Address::parse(email)?;
        check_password(owner_password)?;
        check_upstream(&upstream.host, upstream.port, &upstream.upstream_login)?;
        self.mutate(|state, kdf| {
            if state.account(email.as_str()).is_some() {
                return Err(CredError::DuplicateAccount);
            }
            let record = AccountRecord {
                email,
                upstream: UpstreamTarget {
                    host: upstream.host.clone(),
                    port: upstream.port,
                    use_tls: upstream.use_tls,
                    upstream_login: upstream.upstream_login.clone(),
                    sealed_password: store::seal(upstream.password.as_bytes(), key),
                },
                owner_credential: CredentialRecord::create(owner_password, kdf),
                subusers: Vec::new(),
                lists: Vec::new(),
            };
            state.accounts.push(record.clone());
            Ok(record)
        })
    }

    pub fn delete_account(&mut self, email: &str) -> Result<(), CredError> {
        self.mutate(|state, _| {
            let before = state.accounts.len();
            let email = email.trim().to_ascii_lowercase();
            state.accounts.retain(|a| a.email.as_str() != email);
            if state.accounts.len() == before {
                return Err(CredError::UnknownAccount);
            }
            Ok(())
        })
    }

    /// Replaces the upstream target, resealing the upstream password.
    pub fn set_upstream(
        &mut self,
        email: &str,
        upstream: &UpstreamSpec,
        key: &MasterKey,
    ) -> Result<AccountRecord, CredError> {
        check_upstream(&upstream.host, upstream.port, &upstream.upstream_login)?;
        self.mutate(|state, _| {
            let acct = state.account_mut(email).ok_or(CredError::UnknownAccount)?;
            acct.upstream = UpstreamTarget {
                host: upstream.host.clone(),
                port: upstream.port,
                use_tls: upstream.use_tls,
                upstream_login: upstream.upstream_login.clone(),
                sealed_password: store::seal(upstream.password.as_bytes(), key),
            };
            Ok(acct.clone())
        })
    }

    pub fn add_subuser(
        &mut self,
        email: &str,
        name: &str,
        password: &str,
        policy: PolicySet,
    ) -> Result<SubUserRecord, CredError> {
        check_name(name)?;
        check_password(password)?;
        self.mutate(|state, kdf| {
            let acct = state.account_mut(email).ok_or(CredError::UnknownAccount)?;
            if acct.subuser(name).is_some() {
                return Err(CredError::DuplicateSubUser);
            }
            if acct.subusers.len() >= MAX_SUBUSERS {
                return Err(CredError::SubUserLimit);
            }
            policy::validate(&policy, &acct.lists)?;
            let taken = acct.owner_credential.verify(password)
                || acct.subusers.iter().any(|s| s.credential.verify(password));
            if taken {
                return Err(CredError::PasswordCollision);
            }
            let record = SubUserRecord {
                name: name.to_string(),
                credential: CredentialRecord::create(password, kdf),
                policy,
                readonly: true,
            };
            acct.subusers.push(record.clone());
            Ok(record)
        })
    }

    pub fn remove_subuser(&mut self, email: &str, name: &str) -> Result<(), CredError> {
        self.mutate(|state, _| {
            let acct = state.account_mut(email).ok_or(CredError::UnknownAccount)?;
            let before = acct.subusers.len();
            acct.subusers.retain(|s| s.name != name);
            if acct.subusers.len() == before {
                return Err(CredError::UnknownSubUser);
            }
            Ok(())
        })
    }

    pub fn set_policy(
        &mut self,
        email: &str,
        name: &str,
        policy: PolicySet,
    ) -> Result<SubUserRecord, CredError> {
        self.mutate(|state, _| {
            let acct = state.account_mut(email).ok_or(CredError::UnknownAccount)?;
            policy::validate(&policy, &acct.lists)?;
            let sub = acct
                .subusers
                .iter_mut()
                .find(|s| s.name == name)
                .ok_or(CredError::UnknownSubUser)?;
            sub.policy = policy;
            Ok(sub.clone())
        })
    }

    pub fn manage_list(
        &mut self,
        email: &str,
        list_name: &str,
        action: ListAction,
    ) -> Result<AccountRecord, CredError> {
        self.mutate(|state, _| {
            let acct = state.account_mut(email).ok_or(CredError::UnknownAccount)?;
            match action {
                ListAction::Create => {
                    check_name(list_name)?;
                    if acct.list(list_name).is_some() {
                        return Err(CredError::DuplicateList);
                    }
                    acct.lists.push(AddressList::new(list_name));
                }
                ListAction::Delete => {
                    let idx = acct
                        .lists
                        .iter()
                        .position(|l| l.name == list_name)
                        .ok_or(CredError::UnknownList)?;
                    if acct.subusers.iter().any(|s| s.policy.references_list(list_name)) {
                        return Err(CredError::ListInUse);
                    }
                    acct.lists.remove(idx);
                }
                ListAction::AddMember(member) => {
                    let addr = Address::parse(&member)?;
                    let list = acct
                        .lists
                        .iter_mut()
                        .find(|l| l.name == list_name)
                        .ok_or(CredError::UnknownList)?;
                    list.insert(addr);
                }
                ListAction::RemoveMember(member) => {
                    let addr = Address::parse(&member)?;
                    let list = acct
                        .lists
                        .iter_mut()
                        .find(|l| l.name == list_name)
                        .ok_or(CredError::UnknownList)?;
                    list.members.remove(&addr);
                }
            }
            Ok(acct.clone())
        })
    }
}
