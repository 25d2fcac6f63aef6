use super::token::Cursor;
use super::{CodecError, SyntaxError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Ok,
    No,
    Bad,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "OK",
            Status::No => "NO",
            Status::Bad => "BAD",
        }
    }

    fn parse(word: &[u8]) -> Option<Status> {
        match word.to_ascii_uppercase().as_slice() {
            b"OK" => Some(Status::Ok),
            b"NO" => Some(Status::No),
            b"BAD" => Some(Status::Bad),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ListKind {
    List,
    Lsub,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Untagged {
    Exists(u32),
    Recent(u32),
    Expunge(u32),
    /// Attribute bytes are everything after `FETCH ` up to the final CRLF,
    /// literals included, untouched.
    Fetch { seq: u32, attrs: Vec<u8> },
    Search(Vec<u32>),
    /// `mailbox` is the encoded astring exactly as sent.
    Status { mailbox: Vec<u8>, items: Vec<(String, u64)> },
    Capability(Vec<String>),
    List { kind: ListKind, entry: Vec<u8> },
    /// Anything else; the bytes after `* ` up to the final CRLF.
    Other(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Response {
    Tagged { tag: String, status: Status, text: String },
    Untagged(Untagged),
    /// Bytes after the `+`, leading space included when present.
    Continuation(String),
}

impl Response {
    pub fn tagged(tag: &str, status: Status, text: impl Into<String>) -> Self {
        Response::Tagged {
            tag: tag.to_string(),
            status,
            text: text.into(),
        }
    }
}

/// Parses one complete response frame (see [`read_frame`](super::wire::read_frame)).
///
/// Untagged data whose canonical rendering would differ from the input is
/// returned as [`Untagged::Other`], so `render_response(parse_response(b)) == b`
/// holds for every untagged frame.
pub fn parse_response(frame: &[u8]) -> Result<Response, CodecError> {
    if !frame.ends_with(b"\r\n") {
        return Err(CodecError::syntax(None, "response not CRLF terminated"));
    }
    let body = &frame[..frame.len() - 2];
    if let Some(rest) = body.strip_prefix(b"+") {
        let text = String::from_utf8(rest.to_vec())
            .map_err(|_| CodecError::syntax(None, "continuation is not UTF-8"))?;
        return Ok(Response::Continuation(text));
    }
    if let Some(payload) = body.strip_prefix(b"* ") {
        let parsed = parse_untagged(frame).unwrap_or_else(|_| Untagged::Other(payload.to_vec()));
        let canonical = render_response(&Response::Untagged(parsed.clone()));
        let out = if canonical == frame {
            parsed
        } else {
            Untagged::Other(payload.to_vec())
        };
        return Ok(Response::Untagged(out));
    }
    parse_tagged(body).map_err(|e| CodecError::Syntax { tag: None, error: e })
}

fn parse_tagged(body: &[u8]) -> Result<Response, SyntaxError> {
    let mut c = Cursor::new(body);
    let tag = c.take_while(super::token::is_tag_char);
    if tag.is_empty() {
        return Err(SyntaxError::new("missing tag"));
    }
    c.sp()?;
    let word = c.take_while(|b| b.is_ascii_alphabetic());
    let status = Status::parse(word).ok_or_else(|| c.err("expected OK, NO or BAD"))?;
    let text = match c.peek() {
        None => "",
        Some(b' ') => std::str::from_utf8(&c.rest()[1..]).map_err(|_| c.err("text is not UTF-8"))?,
        Some(_) => return Err(c.err("expected space")),
    };
    if text.contains(['\r', '\n']) {
        return Err(SyntaxError::new("bare line break in response text"));
    }
    Ok(Response::Tagged {
        tag: String::from_utf8(tag.to_vec()).expect("tag chars are ASCII"),
        status,
        text: text.to_string(),
    })
}

fn parse_untagged(frame: &[u8]) -> Result<Untagged, SyntaxError> {
    let mut c = Cursor::new(frame);
    c.advance(2);
    if c.peek().is_some_and(|b| b.is_ascii_digit()) {
        let n = c.number()?;
        c.sp()?;
        let word = c.atom()?.to_ascii_uppercase();
        return match word.as_slice() {
            b"EXISTS" => c.expect_crlf().map(|_| Untagged::Exists(n)),
            b"RECENT" => c.expect_crlf().map(|_| Untagged::Recent(n)),
            b"EXPUNGE" => c.expect_crlf().map(|_| Untagged::Expunge(n)),
            b"FETCH" => {
                c.sp()?;
                let attrs = c.take_until_crlf()?;
                Ok(Untagged::Fetch { seq: n, attrs: attrs.to_vec() })
            }
            _ => Err(SyntaxError::new("unknown numeric response")),
        };
    }
    let word = c.atom()?.to_ascii_uppercase();
    match word.as_slice() {
        b"SEARCH" => {
            let mut nums = Vec::new();
            while c.eat(b' ') {
                nums.push(c.number()?);
            }
            c.expect_crlf()?;
            Ok(Untagged::Search(nums))
        }
        b"CAPABILITY" => {
            let mut caps = Vec::new();
            while c.eat(b' ') {
                caps.push(String::from_utf8(c.atom()?.to_vec()).expect("ASCII"));
            }
            c.expect_crlf()?;
            Ok(Untagged::Capability(caps))
        }
        b"STATUS" => {
            c.sp()?;
            let mailbox = c.astring_raw()?.to_vec();
            c.sp()?;
            c.expect(b'(')?;
            let mut items = Vec::new();
            if !c.eat(b')') {
                loop {
                    let name = String::from_utf8(c.atom()?.to_vec()).expect("ASCII");
                    c.sp()?;
                    items.push((name, c.number64()?));
                    if c.eat(b')') {
                        break;
                    }
                    c.sp()?;
                }
            }
            c.expect_crlf()?;
            Ok(Untagged::Status { mailbox, items })
        }
        b"LIST" | b"LSUB" => {
            c.sp()?;
            let entry = c.take_until_crlf()?.to_vec();
            let kind = if word == b"LIST" { ListKind::List } else { ListKind::Lsub };
            Ok(Untagged::List { kind, entry })
        }
        _ => Err(SyntaxError::new("not a structured response")),
    }
}

/// Canonical encoding of a response.
pub fn render_response(resp: &Response) -> Vec<u8> {
    let mut out = Vec::new();
    match resp {
        Response::Tagged { tag, status, text } => {
            out.extend_from_slice(tag.as_bytes());
            out.push(b' ');
            out.extend_from_slice(status.as_str().as_bytes());
            if !text.is_empty() {
                out.push(b' ');
                out.extend_from_slice(text.as_bytes());
            }
        }
        Response::Continuation(text) => {
            out.push(b'+');
            out.extend_from_slice(text.as_bytes());
        }
        Response::Untagged(u) => {
            out.extend_from_slice(b"* ");
            match u {
                Untagged::Exists(n) => out.extend_from_slice(format!("{n} EXISTS").as_bytes()),
                Untagged::Recent(n) => out.extend_from_slice(format!("{n} RECENT").as_bytes()),
                Untagged::Expunge(n) => out.extend_from_slice(format!("{n} EXPUNGE").as_bytes()),
                Untagged::Fetch { seq, attrs } => {
                    out.extend_from_slice(format!("{seq} FETCH ").as_bytes());
                    out.extend_from_slice(attrs);
                }
                Untagged::Search(nums) => {
                    out.extend_from_slice(b"SEARCH");
                    for n in nums {
                        out.extend_from_slice(format!(" {n}").as_bytes());
                    }
                }
                Untagged::Status { mailbox, items } => {
                    out.extend_from_slice(b"STATUS ");
                    out.extend_from_slice(mailbox);
                    out.extend_from_slice(b" (");
                    let body: Vec<String> = items.iter().map(|(k, v)| format!("{k} {v}")).collect();
                    out.extend_from_slice(body.join(" ").as_bytes());
                    out.push(b')');
                }
                Untagged::Capability(caps) => {
                    out.extend_from_slice(b"CAPABILITY");
                    for c in caps {
                        out.push(b' ');
                        out.extend_from_slice(c.as_bytes());
                    }
                }
                Untagged::List { kind, entry } => {
                    out.extend_from_slice(match kind {
                        ListKind::List => b"LIST ",
                        ListKind::Lsub => b"LSUB ",
                    });
                    out.extend_from_slice(entry);
                }
                Untagged::Other(raw) => out.extend_from_slice(raw),
            }
        }
    }
    out.extend_from_slice(b"\r\n");
    out
}
