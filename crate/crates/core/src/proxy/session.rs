//! One client connection, from greeting to logout.

use std::io;
use std::sync::Arc;

use base64::Engine;
use zeroize::Zeroizing;

use super::config::Endpoint;
use super::metadata::{classify, Snapshot};
use super::tls::Duplex;
use super::upstream::{Completion, Upstream};
use super::{search, SessionError, Shared, CAPABILITIES};
use crate::credstore::{self, Principal};
use crate::imapcodec::fetch::parse_fetch_items;
use crate::imapcodec::wire::{
    make_literals_synchronizing, read_line, split_at_sync_literals, trailing_literal, StreamSource,
};
use crate::imapcodec::{
    encode_astring, parse_command, parse_response, parse_search, render_response, render_search,
    CodecError, ListKind, ReceivedCommand, Response, SequenceSet, Untagged, Verb,
};
use crate::policy::Decision;
use crate::store;
use crate::viewmap::{Downstream, ViewError, ViewState};

const MAX_CLIENT_LINE: usize = 64 * 1024;
const MAX_LOGIN_FAILURES: u32 = 3;
const SYSTEM_FLAGS: &str = "\\Answered \\Flagged \\Deleted \\Seen \\Draft";
const STATUS_ITEMS: [&str; 5] = ["MESSAGES", "RECENT", "UIDNEXT", "UIDVALIDITY", "UNSEEN"];

enum State {
    NotAuthenticated,
    Owner(Upstream),
    SubUser(Box<SubUser>),
}

struct SubUser {
    up: Upstream,
    account: String,
    name: String,
    endpoint: Endpoint,
    upstream_login: String,
    upstream_password: Zeroizing<String>,
    sel: Option<Selection>,
}

struct Selection {
    view: ViewState,
    snapshot: Snapshot,
    /// Latest upstream message count not yet folded into the view.
    pending_exists: Option<u32>,
}

enum Next {
    Continue,
    Close,
}

/// How untagged upstream data is treated while a command runs.
enum Mode {
    /// Keep the view current, send nothing.
    Quiet,
    /// Also relay visible FETCH data, renumbered.
    Relay,
    Search { uid: bool, hits: Vec<u32> },
    List(ListKind),
}

fn desync(e: ViewError) -> SessionError {
    SessionError::Desync(e.to_string())
}

fn send(client: &mut Duplex, text: &str) -> io::Result<()> {
    client.send(format!("{text}\r\n").as_bytes())
}

fn is_bye(raw: &[u8]) -> bool {
    raw.len() >= 3 && raw[..3].eq_ignore_ascii_case(b"BYE")
}

/// Parses the number in `OK [CODE n] ...`.
fn response_code(raw: &[u8], code: &str) -> Option<u32> {
    let text = std::str::from_utf8(raw).ok()?;
    let rest = text.strip_prefix("OK [")?;
    let rest = rest.strip_prefix(code)?.strip_prefix(' ')?;
    rest.split(']').next()?.trim().parse().ok()
}

/// Applies one untagged upstream response to the selection and relays
/// whatever the sub-user may see.
fn absorb(
    u: &Untagged,
    sel: &mut Option<Selection>,
    client: &mut Duplex,
    mode: &mut Mode,
) -> Result<(), SessionError> {
    if let Untagged::Other(raw) = u {
        if is_bye(raw) {
            return Err(SessionError::UpstreamBye);
        }
    }
    let Some(s) = sel.as_mut() else {
        if let (Untagged::List { kind, .. }, Mode::List(want)) = (u, &*mode) {
            if kind == want {
                client.send(&render_response(&Response::Untagged(u.clone())))?;
            }
        }
        return Ok(());
    };
    let known = s.view.upstream_exists();
    let pending_covers = |n: u32, p: Option<u32>| p.is_some_and(|p| n <= p);
    match u {
        Untagged::Exists(n) => s.pending_exists = Some(*n),
        Untagged::Expunge(n) => {
            if *n > known {
                if !pending_covers(*n, s.pending_exists) {
                    return Err(SessionError::Desync(format!("expunge of unknown message {n}")));
                }
            } else if let Some(v) = s.view.apply_upstream_expunge(*n).map_err(desync)? {
                send(client, &format!("* {v} EXPUNGE"))?;
            }
            if let Some(p) = s.pending_exists.as_mut() {
                *p = p.saturating_sub(1);
            }
        }
        Untagged::Fetch { seq, attrs } => {
            if *seq > known {
                if !pending_covers(*seq, s.pending_exists) {
                    return Err(SessionError::Desync(format!("data for unknown message {seq}")));
                }
            } else if let Downstream::Virtual(v) = s.view.map_down_seq(*seq).map_err(desync)? {
                if !matches!(mode, Mode::Quiet) {
                    let out = Response::Untagged(Untagged::Fetch { seq: v, attrs: attrs.clone() });
                    client.send(&render_response(&out))?;
                }
            }
        }
        Untagged::Search(nums) => {
            if let Mode::Search { uid, hits } = mode {
                if *uid {
                    hits.extend(s.view.filter_uids(nums));
                } else {
                    for &n in nums.iter().filter(|&&n| n >= 1 && n <= known) {
                        if let Downstream::Virtual(v) = s.view.map_down_seq(n).map_err(desync)? {
                            hits.push(v);
                        }
                    }
                }
            }
        }
        Untagged::List { kind, .. } => {
            if matches!(mode, Mode::List(want) if want == kind) {
                client.send(&render_response(&Response::Untagged(u.clone())))?;
            }
        }
        Untagged::Other(raw) => {
            if let Some(v) = response_code(raw, "UIDVALIDITY") {
                if v != s.view.uidvalidity() {
                    return Err(SessionError::Desync("UIDVALIDITY changed".into()));
                }
            }
        }
        _ => {}
    }
    Ok(())
}

fn on_frame(
    frame: &[u8],
    sel: &mut Option<Selection>,
    client: &mut Duplex,
    mode: &mut Mode,
) -> Result<(), SessionError> {
    match parse_response(frame) {
        Ok(Response::Untagged(u)) => absorb(&u, sel, client, mode),
        _ => Ok(()),
    }
}

/// Folds messages announced by EXISTS into the view. With `announce`, a
/// new EXISTS goes to the client if any newcomer is visible.
fn absorb_newcomers(
    up: &mut Upstream,
    sel: &mut Option<Selection>,
    client: &mut Duplex,
    announce: bool,
) -> Result<(), SessionError> {
    loop {
        let Some(s) = sel.as_mut() else { return Ok(()) };
        let have = s.view.upstream_exists();
        let Some(target) = s.pending_exists.take() else { return Ok(()) };
        if target < have {
            return Err(SessionError::Desync(format!("EXISTS {target} below known {have}")));
        }
        if target == have {
            return Ok(());
        }
        let snap = s.snapshot.clone();
        let recs = classify(up, have + 1, target, &snap, &mut |u| {
            if matches!(u, Untagged::Expunge(_)) {
                return Err(SessionError::Desync("expunge during metadata fetch".into()));
            }
            absorb(u, sel, client, &mut Mode::Quiet)
        })?;
        let s = sel.as_mut().expect("selection survives classification");
        let msgs: Vec<_> = recs.iter().map(|r| (r.seq, r.uid, r.decision)).collect();
        if let Some(k) = s.view.extend_on_new(&msgs).map_err(desync)? {
            if announce {
                send(client, &format!("* {k} EXISTS"))?;
            }
        }
    }
}

pub(crate) struct Session {
    client: Duplex,
    shared: Arc<Shared>,
    peer: String,
    state: State,
    failures: u32,
}

impl Session {
    pub fn new(client: Duplex, shared: Arc<Shared>, peer: String) -> Self {
        Session {
            client,
            shared,
            peer,
            state: State::NotAuthenticated,
            failures: 0,
        }
    }

    pub fn run(mut self) {
        let greeting = format!("* OK [CAPABILITY {CAPABILITIES}] chamail ready");
        if send(&mut self.client, &greeting).is_ok() {
            loop {
                match self.step() {
                    Ok(Next::Continue) => {}
                    Ok(Next::Close) => break,
                    Err(SessionError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                    Err(e) => {
                        tracing::warn!(peer = %self.peer, error = %e, "session aborted");
                        let _ = send(&mut self.client, "* BYE Session terminated");
                        break;
                    }
                }
            }
        }
        match &mut self.state {
            State::NotAuthenticated => {}
            State::Owner(up) => up.shutdown(),
            State::SubUser(sub) => sub.up.shutdown(),
        }
        self.client.shutdown();
        tracing::debug!(peer = %self.peer, "connection closed");
    }

    fn reply(&mut self, tag: &str, text: &str) -> Result<Next, SessionError> {
        send(&mut self.client, &format!("{tag} {text}"))?;
        Ok(Next::Continue)
    }

    fn step(&mut self) -> Result<Next, SessionError> {
        let line = match read_line(&mut self.client, MAX_CLIENT_LINE) {
            Ok(l) => l,
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                send(&mut self.client, "* BYE Line too long")?;
                return Ok(Next::Close);
            }
            Err(e) => return Err(e.into()),
        };
        if line == b"\r\n" || line == b"\n" {
            return Ok(Next::Continue);
        }
        let mut src = StreamSource {
            stream: &mut self.client,
            max_line: MAX_CLIENT_LINE,
        };
        match parse_command(&line, &mut src) {
            Ok(rc) => self.dispatch(rc),
            Err(CodecError::Io(e)) => Err(e.into()),
            Err(CodecError::LiteralTooLarge { tag, .. }) => {
                let tag = tag.unwrap_or_else(|| "*".into());
                send(&mut self.client, &format!("{tag} BAD Literal too large"))?;
                // Data for a non-synchronizing literal is already on its way.
                let first_sync = trailing_literal(&line).is_some_and(|l| l.synchronizing);
                if first_sync {
                    Ok(Next::Continue)
                } else {
                    send(&mut self.client, "* BYE Protocol error")?;
                    Ok(Next::Close)
                }
            }
            Err(CodecError::Syntax { tag, error }) => {
                let tag = tag.unwrap_or_else(|| "*".into());
                self.reply(&tag, &format!("BAD {error}"))
            }
        }
    }

    fn dispatch(&mut self, rc: ReceivedCommand) -> Result<Next, SessionError> {
        let ReceivedCommand { command, raw } = rc;
        match self.state {
            State::NotAuthenticated => self.not_authenticated(&command.tag, command.verb),
            State::Owner(_) => self.owner(&command.tag, command.verb, &raw),
            State::SubUser(_) => self.subuser(&command.tag, command.verb),
        }
    }

    fn capability(&mut self, tag: &str) -> Result<Next, SessionError> {
        send(&mut self.client, &format!("* CAPABILITY {CAPABILITIES}"))?;
        self.reply(tag, "OK CAPABILITY completed")
    }

    fn not_authenticated(&mut self, tag: &str, verb: Verb) -> Result<Next, SessionError> {
        match verb {
            Verb::Capability => self.capability(tag),
            Verb::Noop => self.reply(tag, "OK NOOP completed"),
            Verb::Logout => {
                send(&mut self.client, "* BYE chamail logging out")?;
                self.reply(tag, "OK LOGOUT completed")?;
                Ok(Next::Close)
            }
            Verb::Login { user, password } => {
                let pw = Zeroizing::new(password.0.clone());
                self.login(tag, "LOGIN", &user, &pw)
            }
            Verb::Authenticate { mechanism, initial } => self.authenticate(tag, &mechanism, initial),
            _ => self.reply(tag, "BAD Command not valid before authentication"),
        }
    }

    fn authenticate(&mut self, tag: &str, mechanism: &str, initial: Option<String>) -> Result<Next, SessionError> {
        if mechanism != "PLAIN" {
            return self.reply(tag, "NO Unsupported authentication mechanism");
        }
        let response = match initial {
            Some(i) => Zeroizing::new(i.into_bytes()),
            None => {
                send(&mut self.client, "+ ")?;
                let l = read_line(&mut self.client, MAX_CLIENT_LINE)?;
                let mut l = Zeroizing::new(l);
                while l.last().is_some_and(|b| *b == b'\n' || *b == b'\r') {
                    l.pop();
                }
                l
            }
        };
        if response.as_slice() == b"*" {
            return self.reply(tag, "BAD Authentication cancelled");
        }
        let decoded = match base64::engine::general_purpose::STANDARD.decode(response.as_slice()) {
            Ok(d) => Zeroizing::new(d),
            Err(_) => return self.reply(tag, "BAD Invalid SASL response"),
        };
        let parts: Vec<&[u8]> = decoded.split(|&b| b == 0).collect();
        let ok_shape = parts.len() == 3 && (parts[0].is_empty() || parts[0] == parts[1]);
        let creds = ok_shape
            .then(|| Some((std::str::from_utf8(parts[1]).ok()?, std::str::from_utf8(parts[2]).ok()?)))
            .flatten();
        let Some((user, pw)) = creds else {
            return self.reply(tag, "BAD Invalid SASL response");
        };
        let (user, pw) = (user.to_string(), Zeroizing::new(pw.to_string()));
        self.login(tag, "AUTHENTICATE", &user, &pw)
    }

    fn login(&mut self, tag: &str, cmd: &str, user: &str, password: &str) -> Result<Next, SessionError> {
        let store = self.shared.store.current();
        let principal = match credstore::authenticate(&store, user, password) {
            Ok(p) => p,
            Err(_) => {
                self.failures += 1;
                tracing::info!(peer = %self.peer, "login failed");
                self.reply(tag, &format!("NO {cmd} failed"))?;
                if self.failures >= MAX_LOGIN_FAILURES {
                    send(&mut self.client, "* BYE Too many failed logins")?;
                    return Ok(Next::Close);
                }
                return Ok(Next::Continue);
            }
        };
        let account = store.account(user).expect("authenticated account exists");
        let email = account.email.as_str().to_string();
        let secret = store::open(&account.upstream.sealed_password, &self.shared.key)
            .ok()
            .and_then(|s| String::from_utf8(s.to_vec()).ok())
            .map(Zeroizing::new);
        let Some(secret) = secret else {
            tracing::error!(account = %email, "cannot decrypt upstream credential");
            return self.reply(tag, "NO [UNAVAILABLE] Upstream credential unavailable");
        };
        let endpoint = self.shared.config.endpoint(&email, &account.upstream);
        let mut up = match Upstream::connect(&endpoint, &self.shared.client_tls) {
            Ok(u) => u,
            Err(e) => {
                tracing::warn!(account = %email, host = %endpoint.host, error = %e, "upstream connect failed");
                return self.reply(tag, "NO [UNAVAILABLE] Upstream server unavailable");
            }
        };
        let upstream_login = account.upstream.upstream_login.clone();
        match up.login(&upstream_login, &secret) {
            Ok(true) => {}
            Ok(false) => {
                tracing::warn!(account = %email, "upstream rejected the stored credential");
                up.shutdown();
                return self.reply(tag, "NO [UNAVAILABLE] Upstream login rejected");
            }
            Err(e) => {
                tracing::warn!(account = %email, error = %e, "upstream login failed");
                up.shutdown();
                return self.reply(tag, "NO [UNAVAILABLE] Upstream server unavailable");
            }
        }
        self.state = match principal {
            Principal::Owner => {
                tracing::info!(peer = %self.peer, account = %email, principal = "owner", "login");
                State::Owner(up)
            }
            Principal::SubUser(name) => {
                tracing::info!(peer = %self.peer, account = %email, subuser = %name, "login");
                State::SubUser(Box::new(SubUser {
                    up,
                    account: email,
                    name,
                    endpoint,
                    upstream_login,
                    upstream_password: secret,
                    sel: None,
                }))
            }
        };
        self.reply(tag, &format!("OK {cmd} completed"))
    }

    fn owner(&mut self, tag: &str, verb: Verb, raw: &[u8]) -> Result<Next, SessionError> {
        match &verb {
            Verb::Capability => return self.capability(tag),
            Verb::Other { name, .. } if name.eq_ignore_ascii_case("STARTTLS") => {
                return self.reply(tag, "BAD STARTTLS not available");
            }
            _ => {}
        }
        let State::Owner(up) = &mut self.state else {
            unreachable!("owner handler outside owner state")
        };
        let bytes = make_literals_synchronizing(raw);
        let pieces = split_at_sync_literals(&bytes);
        let last = pieces.len() - 1;
        let prefix = format!("{tag} ");
        'pieces: for (i, piece) in pieces.iter().enumerate() {
            up.send_raw(piece)?;
            loop {
                let frame = up.read_frame()?;
                if frame.starts_with(b"+") {
                    if i < last {
                        continue 'pieces;
                    }
                    self.client.send(&frame)?;
                    let more = read_line(&mut self.client, MAX_CLIENT_LINE)?;
                    up.send_raw(&more)?;
                    continue;
                }
                self.client.send(&frame)?;
                if frame.starts_with(prefix.as_bytes()) {
                    break 'pieces;
                }
            }
        }
        Ok(if matches!(verb, Verb::Logout) {
            Next::Close
        } else {
            Next::Continue
        })
    }

    fn sub(&mut self) -> &mut SubUser {
        match &mut self.state {
            State::SubUser(s) => s,
            _ => unreachable!("sub-user handler outside sub-user state"),
        }
    }

    fn subuser(&mut self, tag: &str, verb: Verb) -> Result<Next, SessionError> {
        match verb {
            Verb::Capability => self.capability(tag),
            Verb::Noop => self.sub_simple(tag, b"NOOP", "NOOP", Mode::Relay),
            Verb::Logout => {
                self.sub().up.logout();
                send(&mut self.client, "* BYE chamail logging out")?;
                self.reply(tag, "OK LOGOUT completed")?;
                Ok(Next::Close)
            }
            Verb::Login { .. } | Verb::Authenticate { .. } => self.reply(tag, "BAD Already authenticated"),
            Verb::Select(m) => self.sub_select(tag, &m, "SELECT"),
            Verb::Examine(m) => self.sub_select(tag, &m, "EXAMINE"),
            Verb::Close => {
                if self.sub().sel.take().is_none() {
                    return self.reply(tag, "BAD No mailbox selected");
                }
                self.sub_simple(tag, b"CLOSE", "CLOSE", Mode::Quiet)
            }
            Verb::List(args) => {
                let body = [&b"LIST "[..], &args].concat();
                self.sub_simple(tag, &body, "LIST", Mode::List(ListKind::List))
            }
            Verb::Lsub(args) => {
                let body = [&b"LSUB "[..], &args].concat();
                self.sub_simple(tag, &body, "LSUB", Mode::List(ListKind::Lsub))
            }
            Verb::Status { mailbox, items } => self.sub_status(tag, &mailbox, &items),
            Verb::Fetch { set, attrs } => self.sub_fetch(tag, &set, &attrs, false),
            Verb::UidFetch { set, attrs } => self.sub_fetch(tag, &set, &attrs, true),
            Verb::Search(args) => self.sub_search(tag, &args, false),
            Verb::UidSearch(args) => self.sub_search(tag, &args, true),
            Verb::Store { .. } | Verb::UidStore { .. } | Verb::Expunge | Verb::Append(_) | Verb::Other { .. } => {
                let sub = self.sub();
                tracing::info!(account = %sub.account, subuser = %sub.name, command = verb.name(), "write denied");
                self.reply(tag, "NO Permission denied")
            }
        }
    }

    /// Sends the upstream's failure with the client's tag, or runs
    /// newcomer processing and reports success.
    fn finish(&mut self, tag: &str, cmd: &str, done: Completion) -> Result<Next, SessionError> {
        if !done.is_ok() {
            let text = if done.text.is_empty() { format!("{cmd} failed") } else { done.text };
            return self.reply(tag, &format!("{} {text}", done.status.as_str()));
        }
        let SubUser { up, sel, .. } = match &mut self.state {
            State::SubUser(s) => &mut **s,
            _ => unreachable!("sub-user handler outside sub-user state"),
        };
        absorb_newcomers(up, sel, &mut self.client, true)?;
        self.reply(tag, &format!("OK {cmd} completed"))
    }

    fn run_upstream(&mut self, body: &[u8], mode: &mut Mode) -> Result<Completion, SessionError> {
        let SubUser { up, sel, .. } = match &mut self.state {
            State::SubUser(s) => &mut **s,
            _ => unreachable!("sub-user handler outside sub-user state"),
        };
        let client = &mut self.client;
        up.run(body, &mut |frame| on_frame(frame, sel, client, mode))
    }

    fn sub_simple(&mut self, tag: &str, body: &[u8], cmd: &str, mut mode: Mode) -> Result<Next, SessionError> {
        let done = self.run_upstream(body, &mut mode)?;
        self.finish(tag, cmd, done)
    }

    fn snapshot(&mut self) -> Option<Snapshot> {
        let store = self.shared.store.current();
        let sub = self.sub();
        let account = store.account(&sub.account)?;
        let su = account.subuser(&sub.name)?;
        Some(Snapshot {
            principal: Principal::SubUser(sub.name.clone()),
            policy: su.policy.clone(),
            lists: account.lists.clone(),
        })
    }

    fn revoked(&mut self) -> Result<Next, SessionError> {
        let sub = self.sub();
        tracing::info!(account = %sub.account, subuser = %sub.name, "sub-user no longer exists; closing");
        send(&mut self.client, "* BYE Access revoked")?;
        Ok(Next::Close)
    }

    fn sub_select(&mut self, tag: &str, mailbox: &str, cmd: &str) -> Result<Next, SessionError> {
        self.sub().sel = None;
        let Some(snapshot) = self.snapshot() else {
            return self.revoked();
        };
        let sub = match &mut self.state {
            State::SubUser(s) => &mut **s,
            _ => unreachable!("sub-user handler outside sub-user state"),
        };
        let mut body = b"EXAMINE ".to_vec();
        encode_astring(mailbox.as_bytes(), &mut body);
        let (done, info) = examine(&mut sub.up, &body)?;
        if !done.is_ok() {
            return self.finish(tag, cmd, done);
        }
        let Some(exists) = info.exists else {
            return self.reply(tag, "NO [UNAVAILABLE] Mailbox state unavailable");
        };
        let Some(uidvalidity) = info.uidvalidity else {
            return self.reply(tag, "NO [UNAVAILABLE] Mailbox state unavailable");
        };
        let mut pending = None;
        let recs = classify(&mut sub.up, 1, exists, &snapshot, &mut |u| match u {
            Untagged::Exists(n) => {
                pending = Some(*n);
                Ok(())
            }
            Untagged::Expunge(_) => Err(SessionError::Desync("expunge during metadata fetch".into())),
            Untagged::Other(raw) if is_bye(raw) => Err(SessionError::UpstreamBye),
            _ => Ok(()),
        });
        let recs = match recs {
            Ok(r) => r,
            Err(SessionError::Metadata(reason) | SessionError::Protocol(reason)) => {
                tracing::warn!(account = %sub.account, subuser = %sub.name, %reason, "cannot classify mailbox");
                return self.reply(tag, "NO [UNAVAILABLE] Unable to filter mailbox");
            }
            Err(e) => return Err(e),
        };
        let msgs: Vec<_> = recs.iter().map(|r| (r.seq, r.uid, r.decision)).collect();
        let view = ViewState::build_view(&msgs, uidvalidity).map_err(desync)?;
        sub.sel = Some(Selection {
            view,
            snapshot,
            pending_exists: pending,
        });
        absorb_newcomers(&mut sub.up, &mut sub.sel, &mut self.client, false)?;
        let sub = self.sub();
        let view = &sub.sel.as_ref().expect("just selected").view;
        let (visible, total) = (view.exists(), view.upstream_exists());
        tracing::info!(account = %sub.account, subuser = %sub.name, visible, hidden = total - visible, "mailbox selected");
        let mut out = format!("* FLAGS ({SYSTEM_FLAGS})\r\n* {visible} EXISTS\r\n* 0 RECENT\r\n");
        out.push_str(&format!("* OK [UIDVALIDITY {uidvalidity}] UIDs valid\r\n"));
        out.push_str("* OK [PERMANENTFLAGS ()] No permanent flags permitted\r\n");
        out.push_str(&format!("{tag} OK [READ-ONLY] {cmd} completed\r\n"));
        self.client.send(out.as_bytes())?;
        Ok(Next::Continue)
    }

    fn sub_fetch(&mut self, tag: &str, set: &SequenceSet, attrs: &[u8], uid: bool) -> Result<Next, SessionError> {
        let cmd = if uid { "UID FETCH" } else { "FETCH" };
        let Some(sel) = self.sub().sel.as_ref() else {
            return self.reply(tag, "BAD No mailbox selected");
        };
        if parse_fetch_items(attrs).is_err() {
            return self.reply(tag, "BAD Invalid fetch attributes");
        }
        let view = &sel.view;
        let target = if uid {
            let visible = view.visible_uids();
            let max = visible.last().copied().unwrap_or(0);
            let wanted: Vec<u32> = visible.into_iter().filter(|&u| set.contains(u, max)).collect();
            if wanted.is_empty() {
                return self.reply(tag, &format!("OK {cmd} completed"));
            }
            SequenceSet::from_numbers(wanted)
        } else {
            let exists = view.exists();
            if exists == 0 || set.max_explicit().is_some_and(|m| m > exists) {
                return self.reply(tag, "BAD invalid sequence set");
            }
            SequenceSet::from_numbers(view.map_up(set))
        };
        let mut body = format!("{cmd} {target} ").into_bytes();
        body.extend_from_slice(attrs);
        let done = self.run_upstream(&body, &mut Mode::Relay)?;
        self.finish(tag, cmd, done)
    }

    fn sub_search(&mut self, tag: &str, args: &[u8], uid: bool) -> Result<Next, SessionError> {
        let cmd = if uid { "UID SEARCH" } else { "SEARCH" };
        let Some(sel) = self.sub().sel.as_ref() else {
            return self.reply(tag, "BAD No mailbox selected");
        };
        let Ok(criteria) = parse_search(args) else {
            return self.reply(tag, "BAD Invalid search criteria");
        };
        let criteria = search::rewrite(criteria, &sel.view);
        let mut body = format!("{cmd} ").into_bytes();
        body.extend_from_slice(&render_search(&criteria));
        let mut mode = Mode::Search { uid, hits: Vec::new() };
        let done = self.run_upstream(&body, &mut mode)?;
        if done.is_ok() {
            let Mode::Search { mut hits, .. } = mode else { unreachable!() };
            hits.sort_unstable();
            hits.dedup();
            let mut line = String::from("* SEARCH");
            for h in hits {
                line.push_str(&format!(" {h}"));
            }
            send(&mut self.client, &line)?;
        }
        self.finish(tag, cmd, done)
    }

    fn sub_status(&mut self, tag: &str, mailbox: &str, items: &[String]) -> Result<Next, SessionError> {
        if items.is_empty() || items.iter().any(|i| !STATUS_ITEMS.contains(&i.as_str())) {
            return self.reply(tag, "BAD Unsupported STATUS item");
        }
        let Some(snapshot) = self.snapshot() else {
            return self.revoked();
        };
        let sub = self.sub();
        let (endpoint, login) = (sub.endpoint.clone(), sub.upstream_login.clone());
        let password = sub.upstream_password.clone();
        let mut side = match Upstream::connect(&endpoint, &self.shared.client_tls) {
            Ok(u) => u,
            Err(_) => return self.reply(tag, "NO [UNAVAILABLE] Upstream server unavailable"),
        };
        let result = status_counts(&mut side, &login, &password, mailbox, &snapshot);
        side.logout();
        let counts = match result {
            Ok(Ok(c)) => c,
            Ok(Err(done)) => {
                let text = if done.text.is_empty() { "STATUS failed".into() } else { done.text };
                return self.reply(tag, &format!("{} {text}", done.status.as_str()));
            }
            Err(e) => {
                tracing::warn!(error = %e, "status computation failed");
                return self.reply(tag, "NO [UNAVAILABLE] Unable to filter mailbox");
            }
        };
        let mut parts = Vec::new();
        for item in items {
            let v = match item.as_str() {
                "MESSAGES" => Some(counts.messages),
                "RECENT" => Some(0),
                "UNSEEN" => Some(counts.unseen),
                "UIDNEXT" => None,
                _ => counts.uidvalidity,
            };
            if let Some(v) = v {
                parts.push(format!("{item} {v}"));
            }
        }
        let mut out = b"* STATUS ".to_vec();
        encode_astring(mailbox.as_bytes(), &mut out);
        out.extend_from_slice(format!(" ({})\r\n", parts.join(" ")).as_bytes());
        self.client.send(&out)?;
        self.reply(tag, "OK STATUS completed")
    }
}

#[derive(Default)]
struct MailboxInfo {
    exists: Option<u32>,
    uidvalidity: Option<u32>,
}

fn examine(up: &mut Upstream, body: &[u8]) -> Result<(Completion, MailboxInfo), SessionError> {
    let mut info = MailboxInfo::default();
    let done = up.run(body, &mut |frame| {
        match parse_response(frame) {
            Ok(Response::Untagged(Untagged::Exists(n))) => info.exists = Some(n),
            Ok(Response::Untagged(Untagged::Other(raw))) => {
                if is_bye(&raw) {
                    return Err(SessionError::UpstreamBye);
                }
                if let Some(v) = response_code(&raw, "UIDVALIDITY") {
                    info.uidvalidity = Some(v);
                }
            }
            _ => {}
        }
        Ok(())
    })?;
    Ok((done, info))
}

struct StatusCounts {
    messages: u64,
    unseen: u64,
    uidvalidity: Option<u64>,
}

/// Computes STATUS values over the visible messages on a side connection.
/// `Ok(Err(_))` carries an upstream refusal to pass on.
fn status_counts(
    up: &mut Upstream,
    login: &str,
    password: &str,
    mailbox: &str,
    snapshot: &Snapshot,
) -> Result<Result<StatusCounts, Completion>, SessionError> {
    if !up.login(login, password)? {
        return Err(SessionError::Protocol("upstream rejected the stored credential".into()));
    }
    let mut body = b"EXAMINE ".to_vec();
    encode_astring(mailbox.as_bytes(), &mut body);
    let (done, info) = examine(up, &body)?;
    if !done.is_ok() {
        return Ok(Err(done));
    }
    let exists = info
        .exists
        .ok_or_else(|| SessionError::Metadata("no EXISTS in EXAMINE response".into()))?;
    let recs = classify(up, 1, exists, snapshot, &mut |_| Ok(()))?;
    let visible: Vec<_> = recs.iter().filter(|r| r.decision == Decision::Visible).collect();
    let unseen = visible
        .iter()
        .filter(|r| !r.flags.iter().any(|f| f.eq_ignore_ascii_case("\\Seen")))
        .count();
    Ok(Ok(StatusCounts {
        messages: visible.len() as u64,
        unseen: unseen as u64,
        uidvalidity: info.uidvalidity.map(u64::from),
    }))
}
