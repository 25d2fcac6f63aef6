//! Shared test plumbing: the sample inbox, a store wired to a mock upstream,
//! and an independent reference policy evaluator.
#![allow(dead_code)]

pub mod props;
pub mod scenarios;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use chamail_core::credstore::{CredStore, KdfParams, Principal, UpstreamSpec};
use chamail_core::mockimap::{FixtureMailbox, MockServer};
use chamail_core::policy::{
    KeywordMode, MessageMeta, PolicySet, Sender, SenderConstraint, SenderMode,
};
use chamail_core::credstore::{AddressList, ListAction};
use chamail_core::proxy::{Proxy, ProxyConfig, ProxyHandle};
use chamail_core::store::MasterKey;
use zeroize::Zeroizing;

pub const ACCOUNT: &str = "me@example.com";
pub const OWNER_PW: &str = "appleball";
pub const SPOUSE_PW: &str = "catsanddogs";
pub const UPSTREAM_USER: &str = "me@example.com";
pub const UPSTREAM_PW: &str = "upstream-secret-9f3a";

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/sample_inbox")
}

/// The six-message inbox; messages 3 and 5 are from ex@gmail.com.
pub fn sample_mailbox() -> FixtureMailbox {
    FixtureMailbox::load_fixture(&fixture_dir(), "INBOX").expect("sample fixture loads")
}

pub fn blacklist(list: &str) -> PolicySet {
    PolicySet {
        sender_constraints: vec![SenderConstraint {
            mode: SenderMode::Blacklist,
            list: list.into(),
        }],
        keyword_constraints: Vec::new(),
    }
}

pub fn upstream_spec(addr: SocketAddr) -> UpstreamSpec {
    UpstreamSpec {
        host: addr.ip().to_string(),
        port: addr.port(),
        use_tls: false,
        upstream_login: UPSTREAM_USER.into(),
        password: Zeroizing::new(UPSTREAM_PW.into()),
    }
}

/// Creates the account with the owner password and nothing else.
pub fn base_store(path: &Path, upstream: SocketAddr, key: &MasterKey) -> CredStore {
    let mut cs = CredStore::open(path, KdfParams::MINIMAL).unwrap();
    cs.create_account(ACCOUNT, &upstream_spec(upstream), OWNER_PW, key).unwrap();
    cs
}

/// Owner "appleball", sub-user "spouse" with "catsanddogs" under a
/// blacklist of ex@gmail.com.
pub fn sample_store(path: &Path, upstream: SocketAddr, key: &MasterKey) -> CredStore {
    let mut cs = base_store(path, upstream, key);
    cs.manage_list(ACCOUNT, "listblack", ListAction::Create).unwrap();
    cs.manage_list(ACCOUNT, "listblack", ListAction::AddMember("ex@gmail.com".into()))
        .unwrap();
    cs.add_subuser(ACCOUNT, "spouse", SPOUSE_PW, blacklist("listblack")).unwrap();
    cs
}

pub struct Harness {
    pub mock: MockServer,
    pub proxy: ProxyHandle,
    pub key: MasterKey,
    pub store_path: PathBuf,
    _dir: tempfile::TempDir,
}

impl Harness {
    /// Starts a mock holding `mailbox` and a proxy whose store is built by
    /// `setup`.
    pub fn start(
        mailbox: FixtureMailbox,
        setup: impl FnOnce(&Path, SocketAddr, &MasterKey) -> CredStore,
    ) -> Harness {
        let mock = MockServer::builder()
            .mailbox(mailbox)
            .credentials(UPSTREAM_USER, UPSTREAM_PW)
            .start()
            .expect("mock starts");
        Harness::with_mock(mock, setup)
    }

    pub fn with_mock(
        mock: MockServer,
        setup: impl FnOnce(&Path, SocketAddr, &MasterKey) -> CredStore,
    ) -> Harness {
        let dir = tempfile::tempdir().unwrap();
        let store_path = dir.path().join("store.json");
        let key = MasterKey::generate();
        setup(&store_path, mock.addr(), &key);
        let config = ProxyConfig::new("127.0.0.1:0".parse().unwrap(), store_path.clone());
        let proxy = Proxy::bind(config, key.clone()).expect("proxy binds").spawn();
        Harness {
            mock,
            proxy,
            key,
            store_path,
            _dir: dir,
        }
    }

    pub fn sample() -> Harness {
        Harness::start(sample_mailbox(), sample_store)
    }

    pub fn addr(&self) -> SocketAddr {
        self.proxy.addr()
    }
}

/// A straightforward restatement of the visibility rules, kept apart from
/// the library so the two can be compared.
pub fn reference_evaluate(
    policy: &PolicySet,
    meta: &MessageMeta,
    lists: &[AddressList],
    principal: &Principal,
) -> bool {
    if *principal == Principal::Owner {
        return true;
    }
    for c in &policy.sender_constraints {
        let addr = match &meta.sender {
            Sender::Address(a) => a.as_str().to_string(),
            Sender::Unparseable => return false,
        };
        let mut listed = false;
        for l in lists {
            if l.name == c.list {
                for m in &l.members {
                    if m.as_str() == addr {
                        listed = true;
                    }
                }
            }
        }
        let hide = match c.mode {
            SenderMode::Blacklist => listed,
            SenderMode::Whitelist => !listed,
        };
        if hide {
            return false;
        }
    }
    let haystack = format!("{}\u{0}{}", fold(&meta.subject), fold(&meta.body_excerpt));
    for c in &policy.keyword_constraints {
        let mut found = false;
        for k in &c.keywords {
            if haystack.contains(k.as_str()) {
                found = true;
            }
        }
        let ok = match c.mode {
            KeywordMode::RequireAny => found,
            KeywordMode::ForbidAny => !found,
        };
        if !ok {
            return false;
        }
    }
    true
}

fn fold(s: &str) -> String {
    caseless::default_case_fold_str(s)
}
