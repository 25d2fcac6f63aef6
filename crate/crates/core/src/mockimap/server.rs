use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};

use base64::Engine;

use super::fixture::{FixtureMailbox, FixtureMessage};
use crate::imapcodec::fetch::{parse_fetch_items, FetchItem};
use crate::imapcodec::token::Cursor;
use crate::imapcodec::wire::{read_line, StreamSource};
use crate::imapcodec::{
    encode_astring, leading_tag, parse_command, parse_search, CodecError, SearchKey, SequenceSet,
    Verb,
};
use crate::policy::split_header_body;

const MAX_LINE: usize = 64 * 1024;
const CAPABILITIES: &str = "IMAP4rev1 LITERAL+ IDLE AUTH=PLAIN";
const SYSTEM_FLAGS: &str = "\\Answered \\Flagged \\Deleted \\Seen \\Draft";
const INTERNAL_DATE: &str = "\"01-Jan-2020 00:00:00 +0000\"";

/// Something that happens to the mailbox independently of the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    NewMessage { mailbox: String, raw: Vec<u8> },
    Expunge { mailbox: String, uid: u32 },
    /// Closes every open connection.
    DropConnection,
}

/// A command as received, literal data included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoggedCommand {
    pub connection: usize,
    pub raw: Vec<u8>,
}

impl LoggedCommand {
    /// Upper-cased command name; `UID FETCH` style for UID commands.
    pub fn verb(&self) -> String {
        let text = String::from_utf8_lossy(&self.raw);
        let mut words = text.split([' ', '\r', '\n']).skip(1);
        let first = words.next().unwrap_or("").to_ascii_uppercase();
        if first == "UID" {
            format!("UID {}", words.next().unwrap_or("").to_ascii_uppercase())
        } else {
            first
        }
    }
}

struct State {
    mailboxes: Vec<FixtureMailbox>,
    log: Vec<LoggedCommand>,
    transcripts: Vec<Vec<u8>>,
    script: Vec<(usize, Event)>,
    commands: usize,
    streams: Vec<(usize, TcpStream)>,
}

impl State {
    fn mailbox(&self, name: &str) -> Option<&FixtureMailbox> {
        self.mailboxes.iter().find(|m| same_mailbox(&m.name, name))
    }

    fn mailbox_mut(&mut self, name: &str) -> Option<&mut FixtureMailbox> {
        self.mailboxes.iter_mut().find(|m| same_mailbox(&m.name, name))
    }

    fn apply(&mut self, event: Event) {
        match event {
            Event::NewMessage { mailbox, raw } => {
                if let Some(m) = self.mailbox_mut(&mailbox) {
                    m.push(raw, &[]);
                }
            }
            Event::Expunge { mailbox, uid } => {
                if let Some(m) = self.mailbox_mut(&mailbox) {
                    m.messages.retain(|msg| msg.uid != uid);
                }
            }
            Event::DropConnection => {
                for (_, s) in self.streams.drain(..) {
                    let _ = s.shutdown(Shutdown::Both);
                }
            }
        }
    }
}

fn same_mailbox(a: &str, b: &str) -> bool {
    if a.eq_ignore_ascii_case("INBOX") {
        b.eq_ignore_ascii_case("INBOX")
    } else {
        a == b
    }
}

struct Shared {
    state: Mutex<State>,
    user: String,
    password: String,
    stop: AtomicBool,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct MockBuilder {
    mailboxes: Vec<FixtureMailbox>,
    user: String,
    password: String,
    script: Vec<(usize, Event)>,
}

impl MockBuilder {
    pub fn mailbox(mut self, mailbox: FixtureMailbox) -> Self {
        self.mailboxes.push(mailbox);
        self
    }

    pub fn credentials(mut self, user: &str, password: &str) -> Self {
        self.user = user.to_string();
        self.password = password.to_string();
        self
    }

    /// Applies `event` just before the `n`th command (1-based, counted over
    /// all connections) is processed.
    pub fn before_command(mut self, n: usize, event: Event) -> Self {
        self.script.push((n, event));
        self
    }

    pub fn start(self) -> io::Result<MockServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                mailboxes: self.mailboxes,
                log: Vec::new(),
                transcripts: Vec::new(),
                script: self.script,
                commands: 0,
                streams: Vec::new(),
            }),
            user: self.user,
            password: self.password,
            stop: AtomicBool::new(false),
        });
        let accept_shared = Arc::clone(&shared);
        let accept = thread::spawn(move || accept_loop(listener, accept_shared));
        Ok(MockServer {
            addr,
            shared,
            accept: Some(accept),
        })
    }
}

/// An in-process IMAP server over fixture mailboxes.
pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn builder() -> MockBuilder {
        MockBuilder {
            mailboxes: Vec::new(),
            user: "user".into(),
            password: "password".into(),
            script: Vec::new(),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn received(&self) -> Vec<LoggedCommand> {
        self.shared.lock().log.clone()
    }

    pub fn received_verbs(&self) -> Vec<String> {
        self.received().iter().map(LoggedCommand::verb).collect()
    }

    /// Everything the server sent on connection `n` (0-based).
    pub fn transcript(&self, n: usize) -> Vec<u8> {
        self.shared.lock().transcripts.get(n).cloned().unwrap_or_default()
    }

    pub fn connection_count(&self) -> usize {
        self.shared.lock().transcripts.len()
    }

    pub fn inject(&self, event: Event) {
        self.shared.lock().apply(event);
    }

    pub fn mailbox(&self, name: &str) -> Option<FixtureMailbox> {
        self.shared.lock().mailbox(name).cloned()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        self.shared.lock().apply(Event::DropConnection);
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let conn = {
            let mut st = shared.lock();
            st.transcripts.push(Vec::new());
            let id = st.transcripts.len() - 1;
            if let Ok(clone) = stream.try_clone() {
                st.streams.push((id, clone));
            }
            id
        };
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            let mut session = Session {
                io: Recorder {
                    inner: BufReader::new(stream),
                    shared: Arc::clone(&shared),
                    conn,
                },
                shared,
                conn,
                authenticated: false,
                selected: None,
            };
            let _ = session.run();
            session.shared.lock().streams.retain(|(id, _)| *id != conn);
        });
    }
}

/// Duplex stream that copies everything written into the transcript.
struct Recorder {
    inner: BufReader<TcpStream>,
    shared: Arc<Shared>,
    conn: usize,
}

impl Read for Recorder {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.inner.read(buf)
    }
}

impl BufRead for Recorder {
    fn fill_buf(&mut self) -> io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.inner.consume(amt)
    }
}

impl Write for Recorder {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.get_mut().write(buf)?;
        self.shared.lock().transcripts[self.conn].extend_from_slice(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.get_mut().flush()
    }
}

struct Selected {
    name: String,
    read_only: bool,
    /// UIDs in the order the client knows them.
    view: Vec<u32>,
}

struct Session {
    io: Recorder,
    shared: Arc<Shared>,
    conn: usize,
    authenticated: bool,
    selected: Option<Selected>,
}

enum Flow {
    Continue,
    Close,
}

impl Session {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.io.write_all(bytes)?;
        self.io.flush()
    }

    fn line(&mut self, text: &str) -> io::Result<()> {
        self.send(format!("{text}\r\n").as_bytes())
    }

    fn run(&mut self) -> io::Result<()> {
        self.line("* OK mock IMAP server ready")?;
        loop {
            let line = read_line(&mut self.io, MAX_LINE)?;
            let mut src = StreamSource {
                stream: &mut self.io,
                max_line: MAX_LINE,
            };
            let parsed = parse_command(&line, &mut src);
            let raw = match &parsed {
                Ok(r) => r.raw.clone(),
                Err(_) => line.clone(),
            };
            {
                let mut st = self.shared.lock();
                st.commands += 1;
                let n = st.commands;
                st.log.push(LoggedCommand {
                    connection: self.conn,
                    raw,
                });
                let due: Vec<Event> = st
                    .script
                    .iter()
                    .filter(|(at, _)| *at == n)
                    .map(|(_, e)| e.clone())
                    .collect();
                for e in due {
                    st.apply(e);
                }
            }
            let cmd = match parsed {
                Ok(r) => r.command,
                Err(CodecError::Io(e)) => return Err(e),
                Err(e) => {
                    let tag = e.tag().map(str::to_string).or_else(|| leading_tag(&line));
                    let tag = tag.unwrap_or_else(|| "*".into());
                    self.line(&format!("{tag} BAD {e}"))?;
                    continue;
                }
            };
            if let Flow::Close = self.dispatch(&cmd.tag, cmd.verb)? {
                return Ok(());
            }
        }
    }

    fn dispatch(&mut self, tag: &str, verb: Verb) -> io::Result<Flow> {
        match verb {
            Verb::Capability => {
                self.line(&format!("* CAPABILITY {CAPABILITIES}"))?;
                self.line(&format!("{tag} OK CAPABILITY completed"))?;
            }
            Verb::Noop => {
                self.flush_updates()?;
                self.line(&format!("{tag} OK NOOP completed"))?;
            }
            Verb::Logout => {
                self.line("* BYE mock server logging out")?;
                self.line(&format!("{tag} OK LOGOUT completed"))?;
                return Ok(Flow::Close);
            }
            Verb::Login { user, password } => self.login(tag, &user, &password.0)?,
            Verb::Authenticate { mechanism, initial } => self.authenticate(tag, &mechanism, initial)?,
            _ if !self.authenticated => self.line(&format!("{tag} BAD Not authenticated"))?,
            Verb::Select(name) => self.select(tag, &name, false)?,
            Verb::Examine(name) => self.select(tag, &name, true)?,
            Verb::Status { mailbox, items } => self.status(tag, &mailbox, &items)?,
            Verb::List(args) => self.list(tag, &args, "LIST")?,
            Verb::Lsub(args) => self.list(tag, &args, "LSUB")?,
            Verb::Append(args) => self.append(tag, &args)?,
            _ if self.selected.is_none() => self.line(&format!("{tag} BAD No mailbox selected"))?,
            Verb::Close => {
                if let Some(sel) = self.selected.take() {
                    if !sel.read_only {
                        let mut st = self.shared.lock();
                        if let Some(m) = st.mailbox_mut(&sel.name) {
                            m.messages.retain(|msg| !msg.has_flag("\\Deleted"));
                        }
                    }
                }
                self.line(&format!("{tag} OK CLOSE completed"))?;
            }
            Verb::Expunge => self.expunge(tag)?,
            Verb::Fetch { set, attrs } => self.fetch(tag, &set, &attrs, false)?,
            Verb::UidFetch { set, attrs } => self.fetch(tag, &set, &attrs, true)?,
            Verb::Store { set, action } => self.store(tag, &set, &action, false)?,
            Verb::UidStore { set, action } => self.store(tag, &set, &action, true)?,
            Verb::Search(args) => self.search(tag, &args, false)?,
            Verb::UidSearch(args) => self.search(tag, &args, true)?,
            Verb::Other { name, args } => match (name.to_ascii_uppercase().as_str(), args.is_empty()) {
                ("CHECK", true) => self.line(&format!("{tag} OK CHECK completed"))?,
                ("IDLE", true) => self.idle(tag)?,
                _ => self.line(&format!("{tag} BAD Unknown command"))?,
            },
        }
        Ok(Flow::Continue)
    }

    fn login(&mut self, tag: &str, user: &str, password: &str) -> io::Result<()> {
        if self.authenticated {
            return self.line(&format!("{tag} BAD Already authenticated"));
        }
        if user == self.shared.user && password == self.shared.password {
            self.authenticated = true;
            self.line(&format!("{tag} OK LOGIN completed"))
        } else {
            self.line(&format!("{tag} NO [AUTHENTICATIONFAILED] Invalid credentials"))
        }
    }

    fn authenticate(&mut self, tag: &str, mechanism: &str, initial: Option<String>) -> io::Result<()> {
        if mechanism != "PLAIN" || self.authenticated {
            return self.line(&format!("{tag} BAD Unsupported mechanism"));
        }
        let response = match initial {
            Some(i) => i,
            None => {
                self.line("+ ")?;
                let l = read_line(&mut self.io, MAX_LINE)?;
                String::from_utf8_lossy(&l).trim_end().to_string()
            }
        };
        let decoded = base64::engine::general_purpose::STANDARD
            .decode(response.as_bytes())
            .unwrap_or_default();
        let parts: Vec<&[u8]> = decoded.split(|&b| b == 0).collect();
        let ok = parts.len() == 3
            && parts[1] == self.shared.user.as_bytes()
            && parts[2] == self.shared.password.as_bytes();
        if ok {
            self.authenticated = true;
            self.line(&format!("{tag} OK AUTHENTICATE completed"))
        } else {
            self.line(&format!("{tag} NO [AUTHENTICATIONFAILED] Invalid credentials"))
        }
    }

    fn select(&mut self, tag: &str, name: &str, read_only: bool) -> io::Result<()> {
        self.selected = None;
        let Some(mb) = self.shared.lock().mailbox(name).cloned() else {
            return self.line(&format!("{tag} NO Mailbox does not exist"));
        };
        let view: Vec<u32> = mb.messages.iter().map(|m| m.uid).collect();
        self.line(&format!("* FLAGS ({SYSTEM_FLAGS})"))?;
        self.line(&format!("* {} EXISTS", view.len()))?;
        self.line("* 0 RECENT")?;
        if let Some(i) = mb.messages.iter().position(|m| !m.has_flag("\\Seen")) {
            self.line(&format!("* OK [UNSEEN {}] First unseen", i + 1))?;
        }
        self.line(&format!("* OK [UIDVALIDITY {}] UIDs valid", mb.uidvalidity))?;
        self.line(&format!("* OK [UIDNEXT {}] Predicted next UID", mb.uidnext))?;
        if read_only {
            self.line("* OK [PERMANENTFLAGS ()] No permanent flags permitted")?;
        } else {
            self.line(&format!("* OK [PERMANENTFLAGS ({SYSTEM_FLAGS} \\*)] Limited"))?;
        }
        self.selected = Some(Selected {
            name: mb.name.clone(),
            read_only,
            view,
        });
        if read_only {
            self.line(&format!("{tag} OK [READ-ONLY] EXAMINE completed"))
        } else {
            self.line(&format!("{tag} OK [READ-WRITE] SELECT completed"))
        }
    }

    fn status(&mut self, tag: &str, name: &str, items: &[String]) -> io::Result<()> {
        let Some(mb) = self.shared.lock().mailbox(name).cloned() else {
            return self.line(&format!("{tag} NO Mailbox does not exist"));
        };
        let mut parts = Vec::new();
        for item in items {
            let v = match item.as_str() {
                "MESSAGES" => mb.messages.len() as u64,
                "RECENT" => 0,
                "UIDNEXT" => mb.uidnext as u64,
                "UIDVALIDITY" => mb.uidvalidity as u64,
                "UNSEEN" => mb.messages.iter().filter(|m| !m.has_flag("\\Seen")).count() as u64,
                _ => return self.line(&format!("{tag} BAD Unknown status item")),
            };
            parts.push(format!("{item} {v}"));
        }
        let mut out = b"* STATUS ".to_vec();
        encode_astring(name.as_bytes(), &mut out);
        out.extend_from_slice(format!(" ({})\r\n", parts.join(" ")).as_bytes());
        self.send(&out)?;
        self.line(&format!("{tag} OK STATUS completed"))
    }

    fn list(&mut self, tag: &str, args: &[u8], kind: &str) -> io::Result<()> {
        let mut buf = args.to_vec();
        buf.extend_from_slice(b"\r\n");
        let mut c = Cursor::new(&buf);
        let parsed = (|| {
            c.astring()?;
            c.sp()?;
            let pattern = if c.peek() == Some(b'"') {
                c.quoted()?
            } else {
                c.take_while(|b| b != b' ' && b != b'\r').to_vec()
            };
            c.expect_crlf()?;
            Ok::<_, crate::imapcodec::SyntaxError>(pattern)
        })();
        let Ok(pattern) = parsed else {
            return self.line(&format!("{tag} BAD Invalid arguments"));
        };
        if pattern.is_empty() {
            self.line(&format!("* {kind} (\\Noselect) \"/\" \"\""))?;
        } else {
            let names: Vec<String> = self.shared.lock().mailboxes.iter().map(|m| m.name.clone()).collect();
            for name in names {
                if wildcard(&pattern, name.as_bytes()) {
                    let mut out = format!("* {kind} (\\HasNoChildren) \"/\" ").into_bytes();
                    encode_astring(name.as_bytes(), &mut out);
                    out.extend_from_slice(b"\r\n");
                    self.send(&out)?;
                }
            }
        }
        self.line(&format!("{tag} OK {kind} completed"))
    }

    fn append(&mut self, tag: &str, args: &[u8]) -> io::Result<()> {
        let mut buf = args.to_vec();
        buf.extend_from_slice(b"\r\n");
        let mut c = Cursor::new(&buf);
        let parsed = (|| {
            let name = String::from_utf8_lossy(&c.astring()?).into_owned();
            c.sp()?;
            let mut flags = Vec::new();
            if c.eat(b'(') {
                let inner = c.take_while(|b| b != b')');
                flags = String::from_utf8_lossy(inner)
                    .split_whitespace()
                    .map(str::to_string)
                    .collect();
                c.expect(b')')?;
                c.sp()?;
            }
            if c.peek() == Some(b'"') {
                c.quoted()?;
                c.sp()?;
            }
            let data = c.literal()?.to_vec();
            c.expect_crlf()?;
            Ok::<_, crate::imapcodec::SyntaxError>((name, flags, data))
        })();
        let Ok((name, flags, data)) = parsed else {
            return self.line(&format!("{tag} BAD Invalid arguments"));
        };
        let result = {
            let mut st = self.shared.lock();
            st.mailbox_mut(&name).map(|m| {
                let uid = m.uidnext;
                let _ = m.push_with_uid(uid, flags, data);
                (m.uidvalidity, uid)
            })
        };
        match result {
            Some((v, uid)) => self.line(&format!("{tag} OK [APPENDUID {v} {uid}] APPEND completed")),
            None => self.line(&format!("{tag} NO [TRYCREATE] Mailbox does not exist")),
        }
    }

    /// Announces expunges and new messages the client has not seen yet.
    fn flush_updates(&mut self) -> io::Result<()> {
        let Some(sel) = self.selected.as_mut() else {
            return Ok(());
        };
        let current: Vec<u32> = self
            .shared
            .lock()
            .mailbox(&sel.name)
            .map(|m| m.messages.iter().map(|m| m.uid).collect())
            .unwrap_or_default();
        let mut out = Vec::new();
        let mut i = 0;
        while i < sel.view.len() {
            if current.contains(&sel.view[i]) {
                i += 1;
            } else {
                sel.view.remove(i);
                out.extend_from_slice(format!("* {} EXPUNGE\r\n", i + 1).as_bytes());
            }
        }
        let max = sel.view.last().copied().unwrap_or(0);
        let fresh: Vec<u32> = current.into_iter().filter(|&u| u > max).collect();
        if !fresh.is_empty() {
            sel.view.extend(fresh);
            out.extend_from_slice(format!("* {} EXISTS\r\n", sel.view.len()).as_bytes());
        }
        self.send(&out)
    }

    fn idle(&mut self, tag: &str) -> io::Result<()> {
        self.line("+ idling")?;
        self.flush_updates()?;
        loop {
            let l = read_line(&mut self.io, MAX_LINE)?;
            if l.trim_ascii().eq_ignore_ascii_case(b"DONE") {
                return self.line(&format!("{tag} OK IDLE terminated"));
            }
        }
    }

    fn expunge(&mut self, tag: &str) -> io::Result<()> {
        let sel = self.selected.as_mut().expect("checked by dispatch");
        if sel.read_only {
            return self.line(&format!("{tag} NO [READ-ONLY] Mailbox is read-only"));
        }
        let mut out = Vec::new();
        {
            let mut st = self.shared.lock();
            if let Some(m) = st.mailbox_mut(&sel.name) {
                let mut i = 0;
                while i < sel.view.len() {
                    let uid = sel.view[i];
                    if m.by_uid(uid).is_some_and(|msg| msg.has_flag("\\Deleted")) {
                        m.messages.retain(|msg| msg.uid != uid);
                        sel.view.remove(i);
                        out.extend_from_slice(format!("* {} EXPUNGE\r\n", i + 1).as_bytes());
                    } else {
                        i += 1;
                    }
                }
            }
        }
        self.send(&out)?;
        self.line(&format!("{tag} OK EXPUNGE completed"))
    }

    /// Resolves a command's message set to (seq, uid) pairs, or `None` when
    /// the set names sequence numbers that do not exist.
    fn targets(&self, set: &SequenceSet, uid_mode: bool) -> Option<Vec<(u32, u32)>> {
        let sel = self.selected.as_ref()?;
        let n = sel.view.len() as u32;
        if uid_mode {
            let max = sel.view.last().copied().unwrap_or(0);
            return Some(
                sel.view
                    .iter()
                    .enumerate()
                    .filter(|(_, &u)| set.contains(u, max))
                    .map(|(i, &u)| (i as u32 + 1, u))
                    .collect(),
            );
        }
        if n == 0 || set.max_explicit().is_some_and(|m| m > n) {
            return None;
        }
        Some(set.expand(n).into_iter().map(|s| (s, sel.view[s as usize - 1])).collect())
    }

    fn fetch(&mut self, tag: &str, set: &SequenceSet, attrs: &[u8], uid_mode: bool) -> io::Result<()> {
        let cmd = if uid_mode { "UID FETCH" } else { "FETCH" };
        let Ok(mut items) = parse_fetch_items(attrs) else {
            return self.line(&format!("{tag} BAD Invalid fetch items"));
        };
        if uid_mode && !items.iter().any(|i| i.name == "UID") {
            items.insert(0, FetchItem::simple("UID"));
        }
        let Some(targets) = self.targets(set, uid_mode) else {
            return self.line(&format!("{tag} BAD Invalid sequence set"));
        };
        let sel = self.selected.as_ref().expect("checked by dispatch");
        let (name, read_only) = (sel.name.clone(), sel.read_only);
        let marks_seen = !read_only && items.iter().any(FetchItem::sets_seen);
        let mut out = Vec::new();
        for (seq, uid) in targets {
            let msg = {
                let mut st = self.shared.lock();
                let Some(m) = st.mailbox_mut(&name) else { continue };
                let Some(msg) = m.messages.iter_mut().find(|m| m.uid == uid) else {
                    continue;
                };
                let newly_seen = marks_seen && !msg.has_flag("\\Seen");
                if newly_seen {
                    msg.flags.push("\\Seen".into());
                }
                (msg.clone(), newly_seen)
            };
            let (msg, newly_seen) = msg;
            let mut parts = Vec::new();
            for item in &items {
                match render_item(item, &msg) {
                    Ok(p) => parts.push(p),
                    Err(reason) => return self.line(&format!("{tag} BAD {reason}")),
                }
            }
            if newly_seen && !items.iter().any(|i| i.name == "FLAGS") {
                parts.push(flags_item(&msg));
            }
            out.extend_from_slice(format!("* {seq} FETCH (").as_bytes());
            out.extend_from_slice(&parts.join(&b' '));
            out.extend_from_slice(b")\r\n");
        }
        self.send(&out)?;
        self.line(&format!("{tag} OK {cmd} completed"))
    }

    fn store(&mut self, tag: &str, set: &SequenceSet, action: &[u8], uid_mode: bool) -> io::Result<()> {
        let cmd = if uid_mode { "UID STORE" } else { "STORE" };
        let text = String::from_utf8_lossy(action).into_owned();
        let Some((op, rest)) = text.split_once(' ') else {
            return self.line(&format!("{tag} BAD Invalid store action"));
        };
        let op = op.to_ascii_uppercase();
        let silent = op.ends_with(".SILENT");
        let mode = op.trim_end_matches(".SILENT");
        if !matches!(mode, "FLAGS" | "+FLAGS" | "-FLAGS") {
            return self.line(&format!("{tag} BAD Invalid store action"));
        }
        let flags: Vec<String> = rest
            .trim()
            .trim_start_matches('(')
            .trim_end_matches(')')
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let Some(targets) = self.targets(set, uid_mode) else {
            return self.line(&format!("{tag} BAD Invalid sequence set"));
        };
        let sel = self.selected.as_ref().expect("checked by dispatch");
        if sel.read_only {
            return self.line(&format!("{tag} NO [READ-ONLY] Mailbox is read-only"));
        }
        let name = sel.name.clone();
        let mut out = Vec::new();
        {
            let mut st = self.shared.lock();
            let Some(m) = st.mailbox_mut(&name) else {
                drop(st);
                return self.line(&format!("{tag} NO Mailbox vanished"));
            };
            for (seq, uid) in targets {
                let Some(msg) = m.messages.iter_mut().find(|m| m.uid == uid) else {
                    continue;
                };
                match mode {
                    "FLAGS" => msg.flags = flags.clone(),
                    "+FLAGS" => {
                        for f in &flags {
                            if !msg.has_flag(f) {
                                msg.flags.push(f.clone());
                            }
                        }
                    }
                    _ => msg.flags.retain(|have| !flags.iter().any(|f| f.eq_ignore_ascii_case(have))),
                }
                if !silent {
                    let mut line = format!("* {seq} FETCH (").into_bytes();
                    if uid_mode {
                        line.extend_from_slice(format!("UID {uid} ").as_bytes());
                    }
                    line.extend_from_slice(&flags_item(msg));
                    line.extend_from_slice(b")\r\n");
                    out.extend_from_slice(&line);
                }
            }
        }
        self.send(&out)?;
        self.line(&format!("{tag} OK {cmd} completed"))
    }

    fn search(&mut self, tag: &str, args: &[u8], uid_mode: bool) -> io::Result<()> {
        let cmd = if uid_mode { "UID SEARCH" } else { "SEARCH" };
        let Ok(criteria) = parse_search(args) else {
            return self.line(&format!("{tag} BAD Invalid search criteria"));
        };
        let sel = self.selected.as_ref().expect("checked by dispatch");
        let mailbox = self.shared.lock().mailbox(&sel.name).cloned();
        let Some(mailbox) = mailbox else {
            return self.line(&format!("{tag} NO Mailbox vanished"));
        };
        let ctx = SearchCtx {
            exists: sel.view.len() as u32,
            max_uid: sel.view.last().copied().unwrap_or(0),
        };
        let mut hits = Vec::new();
        for (i, &uid) in sel.view.iter().enumerate() {
            let Some(msg) = mailbox.by_uid(uid) else { continue };
            let seq = i as u32 + 1;
            let mut all = true;
            for k in &criteria.keys {
                match matches(k, seq, msg, &ctx) {
                    Ok(true) => {}
                    Ok(false) => {
                        all = false;
                        break;
                    }
                    Err(reason) => return self.line(&format!("{tag} BAD {reason}")),
                }
            }
            if all {
                hits.push(if uid_mode { uid } else { seq });
            }
        }
        let mut line = String::from("* SEARCH");
        for h in hits {
            line.push_str(&format!(" {h}"));
        }
        self.line(&line)?;
        self.line(&format!("{tag} OK {cmd} completed"))
    }
}

fn wildcard(pattern: &[u8], name: &[u8]) -> bool {
    match pattern.split_first() {
        None => name.is_empty(),
        Some((b'*' | b'%', rest)) => (0..=name.len()).any(|i| wildcard(rest, &name[i..])),
        Some((&p, rest)) => name
            .split_first()
            .is_some_and(|(&n, nrest)| p.eq_ignore_ascii_case(&n) && wildcard(rest, nrest)),
    }
}

fn flags_item(msg: &FixtureMessage) -> Vec<u8> {
    format!("FLAGS ({})", msg.flags.join(" ")).into_bytes()
}

fn literal(data: &[u8]) -> Vec<u8> {
    let mut out = format!("{{{}}}\r\n", data.len()).into_bytes();
    out.extend_from_slice(data);
    out
}

fn nstring(value: Option<&[u8]>) -> Vec<u8> {
    match value {
        None => b"NIL".to_vec(),
        Some(v) if v.iter().all(|&b| (0x20..0x7f).contains(&b)) => {
            let mut out = vec![b'"'];
            for &b in v {
                if b == b'"' || b == b'\\' {
                    out.push(b'\\');
                }
                out.push(b);
            }
            out.push(b'"');
            out
        }
        Some(v) => literal(v),
    }
}

fn render_item(item: &FetchItem, msg: &FixtureMessage) -> Result<Vec<u8>, String> {
    let raw = &msg.raw;
    let (header, body) = split_header_body(raw);
    let mut out = Vec::new();
    match (item.name.as_str(), &item.section) {
        ("UID", None) => out.extend_from_slice(format!("UID {}", msg.uid).as_bytes()),
        ("FLAGS", None) => out = flags_item(msg),
        ("INTERNALDATE", None) => out.extend_from_slice(format!("INTERNALDATE {INTERNAL_DATE}").as_bytes()),
        ("RFC822.SIZE", None) => out.extend_from_slice(format!("RFC822.SIZE {}", raw.len()).as_bytes()),
        ("ENVELOPE", None) => {
            out.extend_from_slice(b"ENVELOPE ");
            out.extend_from_slice(&envelope(header));
        }
        ("BODY" | "BODYSTRUCTURE", None) => {
            let lines = body.iter().filter(|&&b| b == b'\n').count();
            out.extend_from_slice(
                format!(
                    "{} (\"TEXT\" \"PLAIN\" (\"CHARSET\" \"US-ASCII\") NIL NIL \"7BIT\" {} {lines})",
                    item.name,
                    body.len()
                )
                .as_bytes(),
            );
        }
        ("RFC822", None) => {
            out.extend_from_slice(b"RFC822 ");
            out.extend_from_slice(&literal(raw));
        }
        ("RFC822.HEADER", None) => {
            out.extend_from_slice(b"RFC822.HEADER ");
            out.extend_from_slice(&literal(header));
        }
        ("RFC822.TEXT", None) => {
            out.extend_from_slice(b"RFC822.TEXT ");
            out.extend_from_slice(&literal(body));
        }
        ("BODY" | "BODY.PEEK", Some(section)) => {
            let data = section_bytes(raw, section)?;
            let data = match item.partial {
                Some((origin, count)) => {
                    let start = (origin as usize).min(data.len());
                    let end = start.saturating_add(count as usize).min(data.len());
                    data[start..end].to_vec()
                }
                None => data,
            };
            out.extend_from_slice(format!("BODY[{section}]").as_bytes());
            if let Some((origin, _)) = item.partial {
                out.extend_from_slice(format!("<{origin}>").as_bytes());
            }
            out.push(b' ');
            out.extend_from_slice(&literal(&data));
        }
        _ => return Err(format!("Unsupported fetch item {}", item.name)),
    }
    Ok(out)
}

fn section_bytes(raw: &[u8], section: &str) -> Result<Vec<u8>, String> {
    let (header, body) = split_header_body(raw);
    let fields = |rest: &str| -> Vec<String> {
        rest.trim()
            .trim_start_matches('(')
            .trim_end_matches(')')
            .split_whitespace()
            .map(str::to_ascii_lowercase)
            .collect()
    };
    Ok(match section {
        "" => raw.to_vec(),
        "HEADER" => header.to_vec(),
        "TEXT" | "1" => body.to_vec(),
        s if s.starts_with("HEADER.FIELDS.NOT ") => filter_header(header, &fields(&s[18..]), false),
        s if s.starts_with("HEADER.FIELDS ") => filter_header(header, &fields(&s[14..]), true),
        _ => return Err(format!("Unsupported section {section}")),
    })
}

/// Header fields as (lower-cased name, raw bytes including continuation lines).
fn header_fields(header: &[u8]) -> Vec<(String, &[u8])> {
    let mut fields: Vec<(String, &[u8])> = Vec::new();
    let mut start = 0;
    let mut pos = 0;
    while pos < header.len() {
        let end = header[pos..].iter().position(|&b| b == b'\n').map_or(header.len(), |i| pos + i + 1);
        let line = &header[pos..end];
        let continuation = line.first().is_some_and(|&b| b == b' ' || b == b'\t');
        if !continuation && pos > start {
            push_field(&mut fields, &header[start..pos]);
            start = pos;
        }
        if line == b"\r\n" || line == b"\n" {
            start = end;
        }
        pos = end;
    }
    if start < header.len() {
        push_field(&mut fields, &header[start..]);
    }
    fields
}

fn push_field<'a>(fields: &mut Vec<(String, &'a [u8])>, block: &'a [u8]) {
    if let Some(colon) = block.iter().position(|&b| b == b':') {
        let name = String::from_utf8_lossy(&block[..colon]).trim().to_ascii_lowercase();
        fields.push((name, block));
    }
}

fn filter_header(header: &[u8], names: &[String], keep: bool) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, block) in header_fields(header) {
        if names.contains(&name) == keep {
            out.extend_from_slice(block);
        }
    }
    out.extend_from_slice(b"\r\n");
    out
}

/// Unfolded value of the first field called `name`.
fn header_value(header: &[u8], name: &str) -> Option<Vec<u8>> {
    header_fields(header)
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, block)| field_value(block))
}

fn field_value(block: &[u8]) -> Vec<u8> {
    let colon = block.iter().position(|&b| b == b':').unwrap_or(0);
    let mut v: Vec<u8> = block[colon + 1..].iter().copied().filter(|&b| b != b'\r' && b != b'\n').collect();
    let lead = v.iter().take_while(|b| b.is_ascii_whitespace()).count();
    v.drain(..lead);
    while v.last().is_some_and(u8::is_ascii_whitespace) {
        v.pop();
    }
    v
}

fn envelope(header: &[u8]) -> Vec<u8> {
    let value = |name: &str| header_value(header, name);
    let addresses = |name: &str| -> Vec<u8> {
        let Some(v) = value(name) else { return b"NIL".to_vec() };
        let Ok(list) = mailparse::addrparse(&String::from_utf8_lossy(&v)) else {
            return b"NIL".to_vec();
        };
        let mut singles = Vec::new();
        for a in list.iter() {
            match a {
                mailparse::MailAddr::Single(s) => singles.push(s.clone()),
                mailparse::MailAddr::Group(g) => singles.extend(g.addrs.iter().cloned()),
            }
        }
        if singles.is_empty() {
            return b"NIL".to_vec();
        }
        let mut out = b"(".to_vec();
        for s in singles {
            let (local, host) = s.addr.rsplit_once('@').unwrap_or((s.addr.as_str(), ""));
            out.push(b'(');
            out.extend_from_slice(&nstring(s.display_name.as_deref().map(str::as_bytes)));
            out.extend_from_slice(b" NIL ");
            out.extend_from_slice(&nstring(Some(local.as_bytes())));
            out.push(b' ');
            out.extend_from_slice(&nstring(Some(host.as_bytes())));
            out.push(b')');
        }
        out.push(b')');
        out
    };
    let from = addresses("from");
    let or_from = |name: &str| if value(name).is_some() { addresses(name) } else { from.clone() };
    let parts = [
        nstring(value("date").as_deref()),
        nstring(value("subject").as_deref()),
        from.clone(),
        or_from("sender"),
        or_from("reply-to"),
        addresses("to"),
        addresses("cc"),
        addresses("bcc"),
        nstring(value("in-reply-to").as_deref()),
        nstring(value("message-id").as_deref()),
    ];
    let mut out = b"(".to_vec();
    out.extend_from_slice(&parts.join(&b' '));
    out.push(b')');
    out
}

struct SearchCtx {
    exists: u32,
    max_uid: u32,
}

fn contains_ci(hay: &[u8], needle: &[u8]) -> bool {
    needle.is_empty()
        || hay
            .windows(needle.len())
            .any(|w| w.eq_ignore_ascii_case(needle))
}

fn matches(key: &SearchKey, seq: u32, msg: &FixtureMessage, ctx: &SearchCtx) -> Result<bool, String> {
    let (header, body) = split_header_body(&msg.raw);
    let header_has = |name: &str, needle: &[u8]| {
        header_fields(header)
            .into_iter()
            .any(|(n, block)| n == name && contains_ci(&field_value(block), needle))
    };
    Ok(match key {
        SearchKey::Flag(name) => match name.as_str() {
            "ALL" | "OLD" => true,
            "NEW" | "RECENT" => false,
            "ANSWERED" => msg.has_flag("\\Answered"),
            "DELETED" => msg.has_flag("\\Deleted"),
            "DRAFT" => msg.has_flag("\\Draft"),
            "FLAGGED" => msg.has_flag("\\Flagged"),
            "SEEN" => msg.has_flag("\\Seen"),
            "UNANSWERED" => !msg.has_flag("\\Answered"),
            "UNDELETED" => !msg.has_flag("\\Deleted"),
            "UNDRAFT" => !msg.has_flag("\\Draft"),
            "UNFLAGGED" => !msg.has_flag("\\Flagged"),
            "UNSEEN" => !msg.has_flag("\\Seen"),
            other => return Err(format!("Unsupported search key {other}")),
        },
        SearchKey::Str { name, value } => match name.as_str() {
            "FROM" | "TO" | "CC" | "BCC" | "SUBJECT" => header_has(&name.to_ascii_lowercase(), value),
            "BODY" => contains_ci(body, value),
            "TEXT" => contains_ci(&msg.raw, value),
            "KEYWORD" => msg.has_flag(&String::from_utf8_lossy(value)),
            "UNKEYWORD" => !msg.has_flag(&String::from_utf8_lossy(value)),
            other => return Err(format!("Unsupported search key {other}")),
        },
        SearchKey::Header { field, value } => {
            header_has(&String::from_utf8_lossy(field).to_ascii_lowercase(), value)
        }
        SearchKey::Size { name, n } => {
            let size = msg.raw.len() as u64;
            if name == "LARGER" {
                size > *n
            } else {
                size < *n
            }
        }
        SearchKey::Seq(set) => set.contains(seq, ctx.exists),
        SearchKey::Uid(set) => set.contains(msg.uid, ctx.max_uid),
        SearchKey::Not(k) => !matches(k, seq, msg, ctx)?,
        SearchKey::Or(a, b) => matches(a, seq, msg, ctx)? || matches(b, seq, msg, ctx)?,
        SearchKey::Group(keys) => {
            for k in keys {
                if !matches(k, seq, msg, ctx)? {
                    return Ok(false);
                }
            }
            true
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_helpers() {
        let h = b"From: A <a@x.org>\r\nSubject: hello\r\n  world\r\nTo: b@y.org\r\n\r\n";
        assert_eq!(header_value(h, "subject").unwrap(), b"hello  world");
        assert_eq!(
            filter_header(h, &["subject".into()], true),
            b"Subject: hello\r\n  world\r\n\r\n"
        );
        assert_eq!(filter_header(h, &["subject".into(), "to".into()], false), b"From: A <a@x.org>\r\n\r\n");
        let env = String::from_utf8(envelope(h)).unwrap();
        assert_eq!(
            env,
            "(NIL \"hello  world\" ((\"A\" NIL \"a\" \"x.org\")) ((\"A\" NIL \"a\" \"x.org\")) ((\"A\" NIL \"a\" \"x.org\")) ((NIL NIL \"b\" \"y.org\")) NIL NIL NIL NIL)"
        );
    }

    #[test]
    fn wildcards() {
        assert!(wildcard(b"*", b"INBOX"));
        assert!(wildcard(b"in%", b"INBOX"));
        assert!(!wildcard(b"Sent", b"INBOX"));
    }

    #[test]
    fn verb_names() {
        let l = LoggedCommand { connection: 0, raw: b"a uid store 1 +FLAGS x\r\n".to_vec() };
        assert_eq!(l.verb(), "UID STORE");
        let l = LoggedCommand { connection: 0, raw: b"a NOOP\r\n".to_vec() };
        assert_eq!(l.verb(), "NOOP");
    }
}
