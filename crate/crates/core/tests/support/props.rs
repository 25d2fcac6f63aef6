//! Generators and checks for the property suites. Each check returns a
//! description of the first violation.

use chamail_core::address::Address;
use chamail_core::credstore::{AddressList, Principal};
use chamail_core::imapcodec::{
    parse_command, parse_command_bytes, parse_response, render_command, render_response,
    CodecError, Command, ListKind, Password, Response, SequenceSet, Status, Untagged, Verb,
    MAX_LITERAL,
};
use chamail_core::imapcodec::wire::LiteralSource;
use chamail_core::policy::{
    evaluate, Decision, KeywordConstraint, KeywordMode, MessageMeta, PolicySet, Sender,
    SenderConstraint, SenderMode,
};
use chamail_core::viewmap::ViewState;
use proptest::prelude::*;

use super::reference_evaluate;

// ---- policy ----

const ADDRESSES: &[&str] = &[
    "ex@gmail.com",
    "mom@example.org",
    "Boss@Work.Example",
    "team@work.example",
    "a.b+c@x.org",
];
const WORDS: &[&str] = &["dinner", "PIE", "Straße", "STRASSE", "hiking", "ünï", "ÜNÏ", "x", "plan"];

fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        prop::sample::select(WORDS).prop_map(str::to_string),
        "[a-zA-Zß ]{1,6}",
    ]
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..6).prop_map(|ws| ws.join(" "))
}

fn sender() -> impl Strategy<Value = Sender> {
    prop_oneof![
        8 => prop::sample::select(ADDRESSES).prop_map(|a| Sender::Address(Address::parse(a).unwrap())),
        1 => Just(Sender::Unparseable),
    ]
}

fn lists() -> impl Strategy<Value = Vec<AddressList>> {
    prop::collection::vec(prop::sample::subsequence(ADDRESSES, 0..=ADDRESSES.len()), 0..3).prop_map(|ls| {
        ls.into_iter()
            .enumerate()
            .map(|(i, members)| {
                let mut l = AddressList::new(&format!("l{i}"));
                for m in members {
                    l.insert(Address::parse(m).unwrap());
                }
                l
            })
            .collect()
    })
}

fn policy() -> impl Strategy<Value = PolicySet> {
    let sender_c = (any::<bool>(), 0..4usize).prop_map(|(black, i)| SenderConstraint {
        mode: if black { SenderMode::Blacklist } else { SenderMode::Whitelist },
        list: format!("l{i}"),
    });
    let keyword_c = (any::<bool>(), prop::collection::vec(word().prop_filter("nonblank", |w| !w.is_empty()), 1..4))
        .prop_map(|(req, ws)| {
            let mode = if req { KeywordMode::RequireAny } else { KeywordMode::ForbidAny };
            KeywordConstraint::new(mode, ws).unwrap()
        });
    (prop::collection::vec(sender_c, 0..3), prop::collection::vec(keyword_c, 0..3)).prop_map(|(s, k)| PolicySet {
        sender_constraints: s,
        keyword_constraints: k,
    })
}

#[derive(Debug, Clone)]
pub struct PolicyCase {
    pub policy: PolicySet,
    pub lists: Vec<AddressList>,
    pub meta: MessageMeta,
    pub principal: Principal,
}

pub fn policy_case() -> impl Strategy<Value = PolicyCase> {
    (policy(), lists(), sender(), text(), text(), prop::bool::weighted(0.9)).prop_map(
        |(policy, lists, sender, subject, body, sub)| PolicyCase {
            policy,
            lists,
            meta: MessageMeta { sender, subject, body_excerpt: body },
            principal: if sub { Principal::SubUser("s".into()) } else { Principal::Owner },
        },
    )
}

pub fn check_policy(c: &PolicyCase) -> Result<(), String> {
    let got = evaluate(&c.policy, &c.meta, &c.lists, &c.principal) == Decision::Visible;
    let want = reference_evaluate(&c.policy, &c.meta, &c.lists, &c.principal);
    if got == want {
        Ok(())
    } else {
        Err(format!("evaluate={got} reference={want} for {c:?}"))
    }
}

// ---- viewmap ----

#[derive(Debug, Clone)]
pub enum ViewOp {
    Extend(Vec<bool>),
    /// Index into the current mailbox, reduced modulo its size.
    Expunge(usize),
}

#[derive(Debug, Clone)]
pub struct ViewCase {
    pub initial: Vec<bool>,
    pub ops: Vec<ViewOp>,
}

pub const VIEW_MAX: usize = 30;

pub fn view_case() -> impl Strategy<Value = ViewCase> {
    let op = prop_oneof![
        prop::collection::vec(any::<bool>(), 1..5).prop_map(ViewOp::Extend),
        any::<usize>().prop_map(ViewOp::Expunge),
    ];
    (prop::collection::vec(any::<bool>(), 0..=VIEW_MAX), prop::collection::vec(op, 0..40))
        .prop_map(|(initial, ops)| ViewCase { initial, ops })
}

fn decision(v: bool) -> Decision {
    if v { Decision::Visible } else { Decision::Hidden }
}

fn rebuild(model: &[(u32, Decision)]) -> ViewState {
    let msgs: Vec<_> = model.iter().enumerate().map(|(i, &(u, d))| (i as u32 + 1, u, d)).collect();
    ViewState::build_view(&msgs, 7).expect("model is consistent")
}

fn check_view_state(view: &ViewState, model: &[(u32, Decision)], step: usize) -> Result<(), String> {
    let fresh = rebuild(model);
    if *view != fresh {
        return Err(format!("step {step}: incremental state differs from rebuild"));
    }
    let entries = view.entries();
    for (i, e) in entries.iter().enumerate() {
        if e.virtual_seq != i as u32 + 1 {
            return Err(format!("step {step}: virtual seqs not contiguous"));
        }
        if model[e.upstream_seq as usize - 1] != (e.uid, Decision::Visible) {
            return Err(format!("step {step}: entry {e:?} does not match model"));
        }
    }
    if entries.len() + view.hidden_uids().len() != view.upstream_exists() as usize
        || view.upstream_exists() as usize != model.len()
    {
        return Err(format!("step {step}: count identity broken"));
    }
    Ok(())
}

pub fn check_view(c: &ViewCase) -> Result<(), String> {
    let mut next_uid = 1u32;
    let mut model: Vec<(u32, Decision)> = Vec::new();
    for &v in &c.initial {
        model.push((next_uid, decision(v)));
        next_uid += 1;
    }
    let mut view = rebuild(&model);
    check_view_state(&view, &model, 0)?;
    for (step, op) in c.ops.iter().enumerate() {
        let step = step + 1;
        match op {
            ViewOp::Extend(ds) => {
                let room = VIEW_MAX - model.len();
                let ds = &ds[..ds.len().min(room)];
                if ds.is_empty() {
                    continue;
                }
                let base = model.len() as u32;
                let msgs: Vec<_> = ds
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (base + i as u32 + 1, next_uid + i as u32, decision(v)))
                    .collect();
                let got = view.extend_on_new(&msgs).map_err(|e| format!("step {step}: {e}"))?;
                for m in &msgs {
                    model.push((m.1, m.2));
                }
                next_uid += ds.len() as u32;
                let visible = model.iter().filter(|m| m.1 == Decision::Visible).count() as u32;
                let want = ds.iter().any(|&v| v).then_some(visible);
                if got != want {
                    return Err(format!("step {step}: extend returned {got:?}, want {want:?}"));
                }
            }
            ViewOp::Expunge(i) => {
                if model.is_empty() {
                    continue;
                }
                let idx = i % model.len();
                let want = (model[idx].1 == Decision::Visible)
                    .then(|| model[..=idx].iter().filter(|m| m.1 == Decision::Visible).count() as u32);
                let got = view
                    .apply_upstream_expunge(idx as u32 + 1)
                    .map_err(|e| format!("step {step}: {e}"))?;
                model.remove(idx);
                if got != want {
                    return Err(format!("step {step}: expunge returned {got:?}, want {want:?}"));
                }
            }
        }
        check_view_state(&view, &model, step)?;
    }
    Ok(())
}

// ---- codec ----

fn tag() -> impl Strategy<Value = String> {
    "[A-Za-z0-9.]{1,8}"
}

fn astring_text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[A-Za-z0-9]{1,10}",
        "[ -~]{0,12}",
        "[a-z]{1,4}\"[a-z]{0,3}\\\\[a-z]{0,3}",
        "[a-zé]{1,5}\r\n[a-z]{1,3}",
    ]
}

fn seq_set() -> impl Strategy<Value = SequenceSet> {
    let part = prop_oneof![
        (1u32..50).prop_map(|n| n.to_string()),
        (1u32..50, 1u32..50).prop_map(|(a, b)| format!("{a}:{b}")),
        (1u32..50).prop_map(|n| format!("{n}:*")),
        Just("*".to_string()),
    ];
    prop::collection::vec(part, 1..4).prop_map(|ps| SequenceSet::parse(&ps.join(",")).unwrap())
}

const FETCH_ATTRS: &[&str] = &[
    "FLAGS",
    "(UID FLAGS)",
    "ALL",
    "(BODY.PEEK[HEADER.FIELDS (FROM SUBJECT)] RFC822.SIZE)",
    "BODY[TEXT]<0.100>",
    "(ENVELOPE INTERNALDATE)",
];
const SEARCHES: &[&str] = &["ALL", "FROM x@y.org", "OR SEEN UID 1:4", "NOT SUBJECT \"a b\"", "CHARSET UTF-8 TEXT hi"];
const STATUS_ITEMS: &[&str] = &["MESSAGES", "RECENT", "UIDNEXT", "UIDVALIDITY", "UNSEEN"];

fn verb() -> impl Strategy<Value = Verb> {
    let bytes = |s: &[&'static str]| prop::sample::select(s.to_vec()).prop_map(|s| s.as_bytes().to_vec());
    prop_oneof![
        Just(Verb::Capability),
        Just(Verb::Noop),
        Just(Verb::Logout),
        Just(Verb::Close),
        Just(Verb::Expunge),
        (astring_text(), astring_text()).prop_map(|(user, pw)| Verb::Login { user, password: Password(pw) }),
        (prop::sample::select(vec!["PLAIN", "LOGIN"]), prop::option::of("[A-Za-z0-9+/]{4,12}={0,2}"))
            .prop_map(|(m, initial)| Verb::Authenticate { mechanism: m.into(), initial }),
        astring_text().prop_map(Verb::Select),
        astring_text().prop_map(Verb::Examine),
        (astring_text(), prop::sample::subsequence(STATUS_ITEMS, 1..=5)).prop_map(|(mailbox, items)| Verb::Status {
            mailbox,
            items: items.into_iter().map(str::to_string).collect(),
        }),
        (seq_set(), bytes(FETCH_ATTRS)).prop_map(|(set, attrs)| Verb::Fetch { set, attrs }),
        (seq_set(), bytes(FETCH_ATTRS)).prop_map(|(set, attrs)| Verb::UidFetch { set, attrs }),
        bytes(SEARCHES).prop_map(Verb::Search),
        bytes(SEARCHES).prop_map(Verb::UidSearch),
        (seq_set(), bytes(&["+FLAGS (\\Seen)", "-FLAGS.SILENT (\\Deleted)"])).prop_map(|(set, action)| Verb::Store { set, action }),
        (seq_set(), bytes(&["FLAGS ()"])).prop_map(|(set, action)| Verb::UidStore { set, action }),
        bytes(&["\"\" *", "\"\" INBOX", "foo %"]).prop_map(Verb::List),
        bytes(&["\"\" *"]).prop_map(Verb::Lsub),
        bytes(&["INBOX {5}\r\nhello", "Drafts (\\Seen) {2}\r\nhi"]).prop_map(Verb::Append),
        ("X[A-Z]{1,6}", prop::sample::select(vec!["", " a", " 1 (b c)"]))
            .prop_map(|(name, args)| Verb::Other { name, args: args.as_bytes().to_vec() }),
    ]
}

pub fn command() -> impl Strategy<Value = Command> {
    (tag(), verb()).prop_map(|(tag, verb)| Command { tag, verb })
}

fn response_text() -> impl Strategy<Value = String> {
    "[A-Za-z][ -~]{0,20}"
}

pub fn response() -> impl Strategy<Value = Response> {
    let status = prop::sample::select(vec![Status::Ok, Status::No, Status::Bad]);
    let untagged = prop_oneof![
        (0u32..1000).prop_map(Untagged::Exists),
        (0u32..1000).prop_map(Untagged::Recent),
        (1u32..1000).prop_map(Untagged::Expunge),
        (1u32..1000, 1u32..1000).prop_map(|(seq, uid)| Untagged::Fetch {
            seq,
            attrs: format!("(UID {uid} FLAGS (\\Seen))").into_bytes(),
        }),
        (1u32..1000).prop_map(|seq| Untagged::Fetch {
            seq,
            attrs: b"(BODY[TEXT] {5}\r\nhello)".to_vec(),
        }),
        prop::collection::vec(1u32..1000, 0..6).prop_map(Untagged::Search),
        prop::collection::vec("[A-Z0-9=+]{1,8}", 1..4).prop_map(Untagged::Capability),
        "[A-Za-z]{1,8}".prop_map(|m| Untagged::List {
            kind: ListKind::List,
            entry: format!("() \"/\" {m}").into_bytes(),
        }),
        "[A-Za-z]{1,8}".prop_map(|m| Untagged::List {
            kind: ListKind::Lsub,
            entry: format!("(\\Noselect) \".\" {m}").into_bytes(),
        }),
        (1u32..1000).prop_map(|n| Untagged::Other(format!("OK [UIDVALIDITY {n}] UIDs valid").into_bytes())),
        Just(Untagged::Other(b"FLAGS (\\Answered \\Seen)".to_vec())),
    ];
    prop_oneof![
        (tag(), status, response_text()).prop_map(|(t, s, x)| Response::tagged(&t, s, x)),
        untagged.prop_map(Response::Untagged),
        prop::sample::select(vec!["", " ", " Ready for literal data", " dGVzdA=="])
            .prop_map(|s| Response::Continuation(s.to_string())),
    ]
}

pub fn check_command(cmd: &Command) -> Result<(), String> {
    let rendered = render_command(cmd);
    let parsed = parse_command_bytes(&rendered)
        .map_err(|e| format!("{e} while parsing {:?}", String::from_utf8_lossy(&rendered)))?;
    if parsed != *cmd {
        return Err(format!("{cmd:?} rendered {:?} parsed as {parsed:?}", String::from_utf8_lossy(&rendered)));
    }
    Ok(())
}

pub fn check_response(resp: &Response) -> Result<(), String> {
    let rendered = render_response(resp);
    let parsed = parse_response(&rendered).map_err(|e| e.to_string())?;
    if parsed != *resp {
        return Err(format!("{resp:?} rendered {:?} parsed as {parsed:?}", String::from_utf8_lossy(&rendered)));
    }
    Ok(())
}

/// `render(parse(frame)) == frame` for every frame of a recorded server
/// transcript.
pub fn check_transcript(transcript: &[u8]) -> Result<usize, String> {
    use chamail_core::imapcodec::wire::read_frame;
    let mut r = std::io::BufReader::new(transcript);
    let mut n = 0;
    loop {
        let frame = match read_frame(&mut r, 1 << 20, 1 << 24) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.to_string()),
        };
        let parsed = parse_response(&frame).map_err(|e| format!("{e}: {:?}", String::from_utf8_lossy(&frame)))?;
        if render_response(&parsed) != frame {
            return Err(format!("frame not reproduced: {:?}", String::from_utf8_lossy(&frame)));
        }
        n += 1;
    }
    Ok(n)
}

/// A literal source that records whether it was ever asked for data.
struct Tripwire(bool);

impl LiteralSource for Tripwire {
    fn continue_literal(&mut self, _len: usize, _sync: bool) -> Result<Vec<u8>, CodecError> {
        self.0 = true;
        Ok(Vec::new())
    }
}

/// A literal one byte over the cap is refused before any data is read.
pub fn check_oversized_literal() -> Result<(), String> {
    for sync in ["", "+"] {
        let line = format!("a1 APPEND INBOX {{{}{sync}}}\r\n", MAX_LITERAL + 1);
        let mut src = Tripwire(false);
        match parse_command(line.as_bytes(), &mut src) {
            Err(CodecError::LiteralTooLarge { tag, .. }) if tag.as_deref() == Some("a1") => {}
            other => return Err(format!("{line:?}: unexpected {other:?}")),
        }
        if src.0 {
            return Err(format!("{line:?}: literal data was requested"));
        }
    }
    let line = format!("a1 APPEND INBOX {{{MAX_LITERAL}}}\r\n");
    let mut src = Tripwire(false);
    let _ = parse_command(line.as_bytes(), &mut src);
    if !src.0 {
        return Err("literal at the cap was refused".into());
    }
    Ok(())
}
