//! Whole-session checks run through the proxy against the mock server.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::Path;

use chamail_core::credstore::{CredStore, KdfParams, ListAction, Principal};
use chamail_core::imapcodec::fetch::{parse_fetch_attrs, Value};
use chamail_core::imapcodec::wire::read_frame;
use chamail_core::imapcodec::{parse_response, Response, Untagged};
use chamail_core::mockimap::{Event, FixtureMailbox, ImapClient, MockServer};
use chamail_core::policy::{extract_meta, KeywordConstraint, KeywordMode, PolicySet, SenderConstraint, SenderMode};
use chamail_core::store::MasterKey;
use proptest::prelude::*;

use super::*;

const KEYWORDS: &[&str] = &["alpha", "bravo", "charlie"];

#[derive(Debug, Clone)]
pub struct LeakMessage {
    pub uid: u32,
    pub sender: String,
    pub subject: String,
    pub keyword: Option<&'static str>,
    pub seen: bool,
}

impl LeakMessage {
    fn raw(&self) -> Vec<u8> {
        let kw = self.keyword.map(|k| format!(" {k}")).unwrap_or_default();
        format!(
            "From: {}\r\nTo: me@example.com\r\nSubject: {}\r\n\r\nplain words only{kw}\r\n",
            self.sender, self.subject
        )
        .into_bytes()
    }
}

#[derive(Debug, Clone)]
pub struct LeakCase {
    pub messages: Vec<LeakMessage>,
    pub arrivals: Vec<LeakMessage>,
    pub listed: Vec<bool>,
    pub whitelist: bool,
    pub keyword: Option<(bool, Vec<&'static str>)>,
    pub expunge: Option<usize>,
}

/// Six-digit tokens keep every sender, subject and UID distinct and free of
/// accidental substring matches.
fn message(i: usize, uid: u32, token: u32, keyword: Option<&'static str>, seen: bool) -> LeakMessage {
    LeakMessage {
        uid,
        sender: format!("snd{i:02}q{token}@host{token}.example"),
        subject: format!("subj{i:02}z{token}"),
        keyword,
        seen,
    }
}

pub fn leak_case() -> impl Strategy<Value = LeakCase> {
    let msg = (
        100_000u32..800_000,
        prop::option::of(prop::sample::select(KEYWORDS)),
        any::<bool>(),
    );
    (
        prop::collection::vec(msg.clone(), 1..10),
        prop::collection::vec(msg, 0..3),
        prop::collection::vec(any::<bool>(), 12),
        any::<bool>(),
        prop::option::of((any::<bool>(), prop::sample::subsequence(KEYWORDS, 1..=2))),
        prop::option::of(any::<usize>()),
    )
        .prop_map(|(initial, arrivals, listed, whitelist, keyword, expunge)| {
            let mut uids: Vec<u32> = initial.iter().map(|m| m.0).collect();
            uids.sort_unstable();
            uids.dedup();
            let messages: Vec<_> = initial
                .iter()
                .zip(&uids)
                .enumerate()
                .map(|(i, (m, &uid))| message(i, uid, uid, m.1, m.2))
                .collect();
            let base = messages.len();
            let arrivals = arrivals
                .iter()
                .enumerate()
                .map(|(j, m)| message(base + j, 0, 850_000 + m.0 % 40_000 + j as u32, m.1, false))
                .collect();
            LeakCase {
                messages,
                arrivals,
                listed,
                whitelist,
                keyword,
                expunge,
            }
        })
}

impl LeakCase {
    fn all(&self) -> impl Iterator<Item = &LeakMessage> {
        self.messages.iter().chain(&self.arrivals)
    }

    fn policy(&self) -> PolicySet {
        PolicySet {
            sender_constraints: vec![SenderConstraint {
                mode: if self.whitelist { SenderMode::Whitelist } else { SenderMode::Blacklist },
                list: "people".into(),
            }],
            keyword_constraints: self
                .keyword
                .iter()
                .map(|(req, ws)| {
                    let mode = if *req { KeywordMode::RequireAny } else { KeywordMode::ForbidAny };
                    KeywordConstraint::new(mode, ws.iter().copied()).unwrap()
                })
                .collect(),
        }
    }

    fn store(&self, path: &Path, upstream: SocketAddr, key: &MasterKey) -> CredStore {
        let mut cs = base_store(path, upstream, key);
        cs.manage_list(ACCOUNT, "people", ListAction::Create).unwrap();
        for (m, &listed) in self.all().zip(&self.listed) {
            if listed {
                cs.manage_list(ACCOUNT, "people", ListAction::AddMember(m.sender.clone())).unwrap();
            }
        }
        cs.add_subuser(ACCOUNT, "viewer", "viewer-password", self.policy()).unwrap();
        cs
    }

    /// Visibility per the reference evaluator.
    fn visible(&self, m: &LeakMessage, cs: &CredStore) -> bool {
        let acct = cs.account(ACCOUNT).unwrap();
        let meta = extract_meta(&m.raw());
        reference_evaluate(&self.policy(), &meta, &acct.lists, &Principal::SubUser("viewer".into()))
    }
}

/// Every UID carried in FETCH data or UID SEARCH results.
fn transcript_uids(transcript: &[u8], uid_search_tags: &[String]) -> Result<BTreeSet<u32>, String> {
    let mut r = std::io::BufReader::new(transcript);
    let mut out = BTreeSet::new();
    let mut pending_search: Vec<u32> = Vec::new();
    loop {
        let frame = match read_frame(&mut r, 1 << 20, 1 << 24) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.to_string()),
        };
        match parse_response(&frame).map_err(|e| e.to_string())? {
            Response::Untagged(Untagged::Fetch { attrs, .. }) => {
                for a in parse_fetch_attrs(&attrs).map_err(|e| e.to_string())? {
                    if a.name == "UID" {
                        if let Value::Number(n) = a.value {
                            out.insert(n as u32);
                        }
                    }
                }
            }
            Response::Untagged(Untagged::Search(nums)) => pending_search = nums,
            Response::Tagged { tag, .. } => {
                if uid_search_tags.contains(&tag) {
                    out.extend(pending_search.drain(..));
                }
                pending_search.clear();
            }
            _ => {}
        }
    }
    Ok(out)
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Runs a read-heavy sub-user session, with arrivals and an expunge
/// mid-session, and checks that no hidden message surfaces.
pub fn check_leak(case: &LeakCase) -> Result<(), String> {
    let mut mailbox = FixtureMailbox::new("INBOX", 1);
    for m in &case.messages {
        let flags = if m.seen { vec!["\\Seen".to_string()] } else { Vec::new() };
        mailbox.push_with_uid(m.uid, flags, m.raw())?;
    }
    let mock = MockServer::builder()
        .mailbox(mailbox)
        .credentials(UPSTREAM_USER, UPSTREAM_PW)
        .start()
        .map_err(|e| e.to_string())?;
    let mut arrivals = case.arrivals.clone();
    let h = Harness::with_mock(mock, |p, a, k| case.store(p, a, k));
    let cs = CredStore::open(&h.store_path, KdfParams::MINIMAL).map_err(|e| e.to_string())?;

    let mut c = ImapClient::connect(h.addr()).map_err(|e| e.to_string())?;
    let io = |e: std::io::Error| e.to_string();
    if !c.login(ACCOUNT, "viewer-password").map_err(io)?.is_ok() {
        return Err("sub-user login failed".into());
    }
    let mut uid_tags = Vec::new();
    let step = |c: &mut ImapClient, cmd: &str, uid_tags: &mut Vec<String>| -> Result<(), String> {
        let r = c.run(cmd).map_err(io)?;
        if cmd.starts_with("UID SEARCH") {
            uid_tags.push(String::from_utf8_lossy(&r.tagged).split(' ').next().unwrap().to_string());
        }
        Ok(())
    };
    let r = c.run("SELECT INBOX").map_err(io)?;
    let want_visible = case.messages.iter().filter(|m| case.visible(m, &cs)).count() as u32;
    if r.exists() != Some(want_visible) {
        return Err(format!("EXISTS {:?}, reference says {want_visible}", r.exists()));
    }
    let mut script: Vec<String> = vec![
        "FETCH 1:* (UID FLAGS ENVELOPE BODY.PEEK[])".into(),
        "UID FETCH 1:* (UID RFC822.HEADER)".into(),
        "SEARCH ALL".into(),
        "UID SEARCH ALL".into(),
        "UID SEARCH UNSEEN".into(),
        "FETCH * (UID)".into(),
        "STATUS INBOX (MESSAGES UNSEEN UIDNEXT)".into(),
        "LIST \"\" *".into(),
    ];
    for m in case.all() {
        script.push(format!("SEARCH FROM {}", m.sender));
        script.push(format!("UID SEARCH SUBJECT {}", m.subject));
        if m.uid != 0 {
            script.push(format!("UID FETCH {} (FLAGS BODY.PEEK[HEADER])", m.uid));
            script.push(format!("UID FETCH {}:* (UID)", m.uid));
        }
    }
    for cmd in &script {
        step(&mut c, cmd, &mut uid_tags)?;
    }
    for a in arrivals.iter_mut() {
        a.uid = h.mock.mailbox("INBOX").unwrap().uidnext;
        h.mock.inject(Event::NewMessage { mailbox: "INBOX".into(), raw: a.raw() });
        step(&mut c, "NOOP", &mut uid_tags)?;
    }
    if let Some(i) = case.expunge {
        let uid = case.messages[i % case.messages.len()].uid;
        h.mock.inject(Event::Expunge { mailbox: "INBOX".into(), uid });
        step(&mut c, "NOOP", &mut uid_tags)?;
    }
    for cmd in &script[..6] {
        step(&mut c, cmd, &mut uid_tags)?;
    }
    step(&mut c, "LOGOUT", &mut uid_tags)?;

    let transcript = c.transcript();
    let seen_uids = transcript_uids(transcript, &uid_tags)?;
    let all: Vec<&LeakMessage> = case.messages.iter().chain(&arrivals).collect();
    let mut visible_count = 0;
    for m in all {
        if case.visible(m, &cs) {
            visible_count += 1;
            continue;
        }
        if seen_uids.contains(&m.uid) {
            return Err(format!("hidden UID {} reported", m.uid));
        }
        for (what, needle) in [
            ("UID", m.uid.to_string()),
            ("sender", m.sender.clone()),
            ("subject", m.subject.clone()),
        ] {
            if contains(transcript, needle.as_bytes()) {
                return Err(format!("hidden {what} {needle:?} in transcript"));
            }
        }
    }
    if visible_count > 0 && seen_uids.is_empty() {
        return Err("no UIDs observed at all; the session did not exercise FETCH".into());
    }
    let verbs = h.mock.received_verbs();
    if verbs.iter().any(|v| ["STORE", "UID STORE", "EXPUNGE", "APPEND", "SELECT"].contains(&v.as_str())) {
        return Err(format!("mutating command reached upstream: {verbs:?}"));
    }
    Ok(())
}

/// Commands without literals, replayed against the mock directly and
/// through the proxy as owner.
pub const OWNER_CORPUS: &[&str] = &[
    "NOOP",
    "LIST \"\" *",
    "LSUB \"\" *",
    "STATUS INBOX (MESSAGES RECENT UIDNEXT UIDVALIDITY UNSEEN)",
    "EXAMINE INBOX",
    "FETCH 1:* (UID FLAGS RFC822.SIZE)",
    "CLOSE",
    "SELECT INBOX",
    "FETCH 1:3 (ENVELOPE INTERNALDATE)",
    "FETCH 2 (BODY.PEEK[HEADER.FIELDS (FROM SUBJECT)])",
    "FETCH 4 BODY[TEXT]",
    "FETCH 5 (BODY[]<0.40> BODYSTRUCTURE)",
    "UID FETCH 3:* (UID FLAGS)",
    "SEARCH FROM ex@gmail.com",
    "UID SEARCH UNSEEN",
    "SEARCH OR SEEN SUBJECT dinner",
    "STORE 1 +FLAGS (\\Flagged)",
    "UID STORE 2 -FLAGS.SILENT (\\Seen)",
    "FETCH 1:2 FLAGS",
    "STORE 6 +FLAGS (\\Deleted)",
    "EXPUNGE",
    "FETCH 99 FLAGS",
    "BOGUS command",
    "CHECK",
    "NOOP",
    "LOGOUT",
];

fn post_login(transcript: &[u8]) -> Vec<u8> {
    let marker = b"\r\nt1 ";
    let start = transcript
        .windows(marker.len())
        .position(|w| w == marker)
        .expect("login reply present");
    let rest = &transcript[start + 2..];
    let eol = rest.iter().position(|&b| b == b'\n').unwrap();
    rest[eol + 1..].to_vec()
}

/// Owner traffic after login is byte-identical to a direct session.
pub fn check_owner_transparency() -> Result<(), String> {
    let io = |e: std::io::Error| e.to_string();
    let direct_mock = MockServer::builder()
        .mailbox(sample_mailbox())
        .credentials(UPSTREAM_USER, UPSTREAM_PW)
        .start()
        .map_err(io)?;
    let mut direct = ImapClient::connect(direct_mock.addr()).map_err(io)?;
    direct.login(UPSTREAM_USER, UPSTREAM_PW).map_err(io)?;
    for cmd in OWNER_CORPUS {
        direct.run(cmd).map_err(io)?;
    }

    let h = Harness::sample();
    let mut proxied = ImapClient::connect(h.addr()).map_err(io)?;
    if !proxied.login(ACCOUNT, OWNER_PW).map_err(io)?.is_ok() {
        return Err("owner login failed".into());
    }
    for cmd in OWNER_CORPUS {
        proxied.run(cmd).map_err(io)?;
    }
    let a = post_login(direct.transcript());
    let b = post_login(proxied.transcript());
    if a.len() < 500 {
        return Err("direct transcript suspiciously short".into());
    }
    if a != b {
        let at = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
        let from = at.saturating_sub(60);
        return Err(format!(
            "transcripts differ at byte {at}: direct {:?} proxied {:?}",
            String::from_utf8_lossy(&a[from..(at + 60).min(a.len())]),
            String::from_utf8_lossy(&b[from..(at + 60).min(b.len())])
        ));
    }
    let upstream_cmds: Vec<String> = h.mock.received().iter().map(|c| String::from_utf8_lossy(&c.raw).into_owned()).collect();
    if !upstream_cmds.iter().any(|c| c.contains("FETCH 1:* (UID FLAGS RFC822.SIZE)")) {
        return Err("owner FETCH did not reach upstream verbatim".into());
    }
    Ok(())
}
