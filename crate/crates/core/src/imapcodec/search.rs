//! SEARCH criteria.

use super::sequence::SequenceSet;
use super::token::{encode_astring, Cursor};
use super::SyntaxError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SearchKey {
    /// Keys without arguments: ALL, SEEN, UNDELETED, ...
    Flag(String),
    /// Keys with one string argument: FROM, SUBJECT, BODY, KEYWORD, SINCE, ...
    Str { name: String, value: Vec<u8> },
    Header { field: Vec<u8>, value: Vec<u8> },
    /// LARGER / SMALLER.
    Size { name: String, n: u64 },
    Seq(SequenceSet),
    Uid(SequenceSet),
    Not(Box<SearchKey>),
    Or(Box<SearchKey>, Box<SearchKey>),
    Group(Vec<SearchKey>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchCriteria {
    pub charset: Option<String>,
    /// Implicitly AND-ed.
    pub keys: Vec<SearchKey>,
}

const FLAG_KEYS: &[&str] = &[
    "ALL", "ANSWERED", "DELETED", "DRAFT", "FLAGGED", "NEW", "OLD", "RECENT", "SEEN",
    "UNANSWERED", "UNDELETED", "UNDRAFT", "UNFLAGGED", "UNSEEN",
];

const STRING_KEYS: &[&str] = &[
    "BCC", "BODY", "CC", "FROM", "SUBJECT", "TEXT", "TO", "KEYWORD", "UNKEYWORD", "BEFORE", "ON",
    "SINCE", "SENTBEFORE", "SENTON", "SENTSINCE",
];

/// Parses the argument bytes of a SEARCH command.
pub fn parse_search(args: &[u8]) -> Result<SearchCriteria, SyntaxError> {
    let mut buf = args.to_vec();
    buf.extend_from_slice(b"\r\n");
    let mut c = Cursor::new(&buf);
    let mut charset = None;
    let save = c.pos();
    if c.atom().is_ok_and(|a| a.eq_ignore_ascii_case(b"CHARSET")) {
        c.sp()?;
        let cs = c.astring()?;
        charset = Some(String::from_utf8(cs).map_err(|_| c.err("bad charset"))?);
        c.sp()?;
    } else {
        c = Cursor::new(&buf);
        c.advance(save);
    }
    let mut keys = vec![key(&mut c)?];
    while c.eat(b' ') {
        keys.push(key(&mut c)?);
    }
    c.expect_crlf()?;
    Ok(SearchCriteria { charset, keys })
}

fn key(c: &mut Cursor<'_>) -> Result<SearchKey, SyntaxError> {
    if c.eat(b'(') {
        let mut keys = vec![key(c)?];
        while c.eat(b' ') {
            keys.push(key(c)?);
        }
        c.expect(b')')?;
        return Ok(SearchKey::Group(keys));
    }
    if c.peek().is_some_and(|b| b.is_ascii_digit() || b == b'*') {
        return Ok(SearchKey::Seq(set(c)?));
    }
    let name = c.atom()?.to_ascii_uppercase();
    let name = String::from_utf8(name).expect("ASCII");
    if FLAG_KEYS.contains(&name.as_str()) {
        return Ok(SearchKey::Flag(name));
    }
    if STRING_KEYS.contains(&name.as_str()) {
        c.sp()?;
        let value = c.astring()?;
        return Ok(SearchKey::Str { name, value });
    }
    match name.as_str() {
        "HEADER" => {
            c.sp()?;
            let field = c.astring()?;
            c.sp()?;
            let value = c.astring()?;
            Ok(SearchKey::Header { field, value })
        }
        "LARGER" | "SMALLER" => {
            c.sp()?;
            let n = c.number64()?;
            Ok(SearchKey::Size { name, n })
        }
        "UID" => {
            c.sp()?;
            Ok(SearchKey::Uid(set(c)?))
        }
        "NOT" => {
            c.sp()?;
            Ok(SearchKey::Not(Box::new(key(c)?)))
        }
        "OR" => {
            c.sp()?;
            let a = key(c)?;
            c.sp()?;
            let b = key(c)?;
            Ok(SearchKey::Or(Box::new(a), Box::new(b)))
        }
        _ => Err(c.err(format!("unknown search key {name}"))),
    }
}

fn set(c: &mut Cursor<'_>) -> Result<SequenceSet, SyntaxError> {
    let tok = c.take_while(|b| b.is_ascii_digit() || b"*:,".contains(&b));
    SequenceSet::parse(std::str::from_utf8(tok).expect("ASCII"))
}

/// Canonical encoding, suitable for sending after `SEARCH `.
pub fn render_search(criteria: &SearchCriteria) -> Vec<u8> {
    let mut out = Vec::new();
    if let Some(cs) = &criteria.charset {
        out.extend_from_slice(b"CHARSET ");
        encode_astring(cs.as_bytes(), &mut out);
        out.push(b' ');
    }
    render_keys(&criteria.keys, &mut out);
    out
}

fn render_keys(keys: &[SearchKey], out: &mut Vec<u8>) {
    for (i, k) in keys.iter().enumerate() {
        if i > 0 {
            out.push(b' ');
        }
        render_key(k, out);
    }
}

fn render_key(k: &SearchKey, out: &mut Vec<u8>) {
    match k {
        SearchKey::Flag(name) => out.extend_from_slice(name.as_bytes()),
        SearchKey::Str { name, value } => {
            out.extend_from_slice(name.as_bytes());
            out.push(b' ');
            encode_astring(value, out);
        }
        SearchKey::Header { field, value } => {
            out.extend_from_slice(b"HEADER ");
            encode_astring(field, out);
            out.push(b' ');
            encode_astring(value, out);
        }
        SearchKey::Size { name, n } => out.extend_from_slice(format!("{name} {n}").as_bytes()),
        SearchKey::Seq(s) => out.extend_from_slice(s.to_string().as_bytes()),
        SearchKey::Uid(s) => out.extend_from_slice(format!("UID {s}").as_bytes()),
        SearchKey::Not(k) => {
            out.extend_from_slice(b"NOT ");
            render_key(k, out);
        }
        SearchKey::Or(a, b) => {
            out.extend_from_slice(b"OR ");
            render_key(a, out);
            out.push(b' ');
            render_key(b, out);
        }
        SearchKey::Group(keys) => {
            out.push(b'(');
            render_keys(keys, out);
            out.push(b')');
        }
    }
}

impl SearchKey {
    /// Applies `f` to every key in the tree, innermost first.
    pub fn rewrite(self, f: &mut impl FnMut(SearchKey) -> SearchKey) -> SearchKey {
        let inner = match self {
            SearchKey::Not(k) => SearchKey::Not(Box::new(k.rewrite(f))),
            SearchKey::Or(a, b) => SearchKey::Or(Box::new(a.rewrite(f)), Box::new(b.rewrite(f))),
            SearchKey::Group(ks) => SearchKey::Group(ks.into_iter().map(|k| k.rewrite(f)).collect()),
            other => other,
        };
        f(inner)
    }
}
