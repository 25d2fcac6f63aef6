use std::fmt;

use zeroize::Zeroize;

use super::sequence::SequenceSet;
use super::token::{encode_astring, is_tag_char, Cursor};
use super::wire::{check_literal_len, trailing_literal, LiteralSource};
use super::{CodecError, SyntaxError};

pub const MAX_TAG_LEN: usize = 32;

/// A password argument. Redacted from `Debug` and wiped on drop.
#[derive(Clone, PartialEq, Eq)]
pub struct Password(pub String);

impl fmt::Debug for Password {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Password(<redacted>)")
    }
}

impl Drop for Password {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verb {
    Capability,
    Noop,
    Logout,
    Login { user: String, password: Password },
    Authenticate { mechanism: String, initial: Option<String> },
    List(Vec<u8>),
    Lsub(Vec<u8>),
    Status { mailbox: String, items: Vec<String> },
    Select(String),
    Examine(String),
    Close,
    Fetch { set: SequenceSet, attrs: Vec<u8> },
    UidFetch { set: SequenceSet, attrs: Vec<u8> },
    Search(Vec<u8>),
    UidSearch(Vec<u8>),
    Store { set: SequenceSet, action: Vec<u8> },
    UidStore { set: SequenceSet, action: Vec<u8> },
    Expunge,
    Append(Vec<u8>),
    /// Anything else. `args` holds every byte between the verb name and the
    /// final CRLF, leading space included, so the command re-renders exactly.
    Other { name: String, args: Vec<u8> },
}

impl Verb {
    pub fn name(&self) -> &str {
        match self {
            Verb::Capability => "CAPABILITY",
            Verb::Noop => "NOOP",
            Verb::Logout => "LOGOUT",
            Verb::Login { .. } => "LOGIN",
            Verb::Authenticate { .. } => "AUTHENTICATE",
            Verb::List(_) => "LIST",
            Verb::Lsub(_) => "LSUB",
            Verb::Status { .. } => "STATUS",
            Verb::Select(_) => "SELECT",
            Verb::Examine(_) => "EXAMINE",
            Verb::Close => "CLOSE",
            Verb::Fetch { .. } => "FETCH",
            Verb::UidFetch { .. } => "UID FETCH",
            Verb::Search(_) => "SEARCH",
            Verb::UidSearch(_) => "UID SEARCH",
            Verb::Store { .. } => "STORE",
            Verb::UidStore { .. } => "UID STORE",
            Verb::Expunge => "EXPUNGE",
            Verb::Append(_) => "APPEND",
            Verb::Other { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub tag: String,
    pub verb: Verb,
}

/// A command as received: the parsed form plus the exact bytes, literal
/// data included, for passthrough.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedCommand {
    pub command: Command,
    pub raw: Vec<u8>,
}

/// Best-effort tag extraction for error replies.
pub fn leading_tag(bytes: &[u8]) -> Option<String> {
    let end = bytes.iter().position(|&c| !is_tag_char(c))?;
    if end == 0 || end > MAX_TAG_LEN || bytes[end] != b' ' {
        return None;
    }
    String::from_utf8(bytes[..end].to_vec()).ok()
}

/// Assembles a command starting at `line`, pulling literal data from
/// `literals`, and parses it. Literals over the cap are refused before any
/// of their bytes are requested.
pub fn parse_command(
    line: &[u8],
    literals: &mut dyn LiteralSource,
) -> Result<ReceivedCommand, CodecError> {
    let mut raw = line.to_vec();
    let mut line_start = 0;
    while let Some(lit) = trailing_literal(&raw[line_start..]) {
        let tag = leading_tag(&raw);
        let len = check_literal_len(lit.len, tag.as_deref())?;
        let more = literals.continue_literal(len, lit.synchronizing)?;
        if more.len() < len {
            return Err(CodecError::syntax(tag, "truncated literal"));
        }
        raw.extend_from_slice(&more);
        line_start = raw.len() - (more.len() - len);
    }
    let command = parse_command_bytes(&raw)?;
    Ok(ReceivedCommand { command, raw })
}

/// Parses one fully framed command (literal data inline, final CRLF included).
pub fn parse_command_bytes(raw: &[u8]) -> Result<Command, CodecError> {
    let tag = leading_tag(raw);
    parse_inner(raw).map_err(|e| CodecError::Syntax { tag, error: e })
}

fn utf8(bytes: Vec<u8>, what: &str) -> Result<String, SyntaxError> {
    String::from_utf8(bytes).map_err(|_| SyntaxError::new(format!("{what} is not UTF-8")))
}

fn seqset(c: &mut Cursor<'_>) -> Result<SequenceSet, SyntaxError> {
    let tok = c.take_while(|b| b != b' ' && b != b'\r');
    let text = std::str::from_utf8(tok).map_err(|_| c.err("bad sequence set"))?;
    SequenceSet::parse(text)
}

fn nonempty_rest(c: &mut Cursor<'_>) -> Result<Vec<u8>, SyntaxError> {
    c.sp()?;
    let rest = c.take_until_crlf()?;
    if rest.is_empty() {
        return Err(SyntaxError::new("missing arguments"));
    }
    Ok(rest.to_vec())
}

fn parse_inner(raw: &[u8]) -> Result<Command, SyntaxError> {
    let mut c = Cursor::new(raw);
    let tag = c.take_while(is_tag_char);
    if tag.is_empty() || tag.len() > MAX_TAG_LEN {
        return Err(SyntaxError::new("missing or invalid tag"));
    }
    let tag = String::from_utf8(tag.to_vec()).expect("tag chars are ASCII");
    c.sp()?;
    let name_bytes = c.atom()?;
    let name = String::from_utf8(name_bytes.to_vec()).expect("atom chars are ASCII");
    let upper = name.to_ascii_uppercase();

    let verb = match upper.as_str() {
        "CAPABILITY" => {
            c.expect_crlf()?;
            Verb::Capability
        }
        "NOOP" => {
            c.expect_crlf()?;
            Verb::Noop
        }
        "LOGOUT" => {
            c.expect_crlf()?;
            Verb::Logout
        }
        "CLOSE" => {
            c.expect_crlf()?;
            Verb::Close
        }
        "EXPUNGE" => {
            c.expect_crlf()?;
            Verb::Expunge
        }
        "LOGIN" => {
            c.sp()?;
            let user = utf8(c.astring()?, "user name")?;
            c.sp()?;
            let password = Password(utf8(c.astring()?, "password")?);
            c.expect_crlf()?;
            Verb::Login { user, password }
        }
        "AUTHENTICATE" => {
            c.sp()?;
            let mechanism = String::from_utf8(c.atom()?.to_vec())
                .expect("atom chars are ASCII")
                .to_ascii_uppercase();
            let initial = if c.eat(b' ') {
                let tok = c.take_while(|b| b.is_ascii_alphanumeric() || b"+/=".contains(&b));
                if tok.is_empty() {
                    return Err(c.err("bad initial response"));
                }
                Some(String::from_utf8(tok.to_vec()).expect("base64 chars are ASCII"))
            } else {
                None
            };
            c.expect_crlf()?;
            Verb::Authenticate { mechanism, initial }
        }
        "SELECT" | "EXAMINE" => {
            c.sp()?;
            let mailbox = utf8(c.astring()?, "mailbox")?;
            c.expect_crlf()?;
            if upper == "SELECT" {
                Verb::Select(mailbox)
            } else {
                Verb::Examine(mailbox)
            }
        }
        "STATUS" => {
            c.sp()?;
            let mailbox = utf8(c.astring()?, "mailbox")?;
            c.sp()?;
            c.expect(b'(')?;
            let mut items = Vec::new();
            loop {
                let a = c.atom()?;
                items.push(String::from_utf8(a.to_vec()).expect("ASCII").to_ascii_uppercase());
                if c.eat(b')') {
                    break;
                }
                c.sp()?;
            }
            c.expect_crlf()?;
            Verb::Status { mailbox, items }
        }
        "LIST" => Verb::List(nonempty_rest(&mut c)?),
        "LSUB" => Verb::Lsub(nonempty_rest(&mut c)?),
        "APPEND" => Verb::Append(nonempty_rest(&mut c)?),
        "SEARCH" => Verb::Search(nonempty_rest(&mut c)?),
        "FETCH" | "STORE" => {
            c.sp()?;
            let set = seqset(&mut c)?;
            let rest = nonempty_rest(&mut c)?;
            if upper == "FETCH" {
                Verb::Fetch { set, attrs: rest }
            } else {
                Verb::Store { set, action: rest }
            }
        }
        "UID" => {
            let save = c.pos();
            c.sp()?;
            let sub = c.atom()?.to_ascii_uppercase();
            match sub.as_slice() {
                b"FETCH" | b"STORE" => {
                    c.sp()?;
                    let set = seqset(&mut c)?;
                    let rest = nonempty_rest(&mut c)?;
                    if sub == b"FETCH" {
                        Verb::UidFetch { set, attrs: rest }
                    } else {
                        Verb::UidStore { set, action: rest }
                    }
                }
                b"SEARCH" => Verb::UidSearch(nonempty_rest(&mut c)?),
                _ => {
                    let mut c = Cursor::new(raw);
                    c.advance(save);
                    Verb::Other {
                        name,
                        args: c.take_until_crlf()?.to_vec(),
                    }
                }
            }
        }
        _ => {
            let args = c.take_until_crlf()?.to_vec();
            if !args.is_empty() && args[0] != b' ' {
                return Err(SyntaxError::new("expected space after command name"));
            }
            Verb::Other { name, args }
        }
    };
    Ok(Command { tag, verb })
}

/// Canonical encoding of a command.
pub fn render_command(cmd: &Command) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(cmd.tag.as_bytes());
    out.push(b' ');
    match &cmd.verb {
        Verb::Login { user, password } => {
            out.extend_from_slice(b"LOGIN ");
            encode_astring(user.as_bytes(), &mut out);
            out.push(b' ');
            encode_astring(password.0.as_bytes(), &mut out);
        }
        Verb::Authenticate { mechanism, initial } => {
            out.extend_from_slice(b"AUTHENTICATE ");
            out.extend_from_slice(mechanism.as_bytes());
            if let Some(i) = initial {
                out.push(b' ');
                out.extend_from_slice(i.as_bytes());
            }
        }
        Verb::List(args) | Verb::Lsub(args) | Verb::Append(args) | Verb::Search(args) | Verb::UidSearch(args) => {
            out.extend_from_slice(cmd.verb.name().as_bytes());
            out.push(b' ');
            out.extend_from_slice(args);
        }
        Verb::Status { mailbox, items } => {
            out.extend_from_slice(b"STATUS ");
            encode_astring(mailbox.as_bytes(), &mut out);
            out.extend_from_slice(b" (");
            out.extend_from_slice(items.join(" ").as_bytes());
            out.push(b')');
        }
        Verb::Select(mailbox) | Verb::Examine(mailbox) => {
            out.extend_from_slice(cmd.verb.name().as_bytes());
            out.push(b' ');
            encode_astring(mailbox.as_bytes(), &mut out);
        }
        Verb::Fetch { set, attrs: rest }
        | Verb::UidFetch { set, attrs: rest }
        | Verb::Store { set, action: rest }
        | Verb::UidStore { set, action: rest } => {
            out.extend_from_slice(cmd.verb.name().as_bytes());
            out.push(b' ');
            out.extend_from_slice(set.to_string().as_bytes());
            out.push(b' ');
            out.extend_from_slice(rest);
        }
        Verb::Other { name, args } => {
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(args);
        }
        Verb::Capability | Verb::Noop | Verb::Logout | Verb::Close | Verb::Expunge => {
            out.extend_from_slice(cmd.verb.name().as_bytes());
        }
    }
    out.extend_from_slice(b"\r\n");
    out
}
