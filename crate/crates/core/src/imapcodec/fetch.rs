//! FETCH data items: the request side (`BODY.PEEK[HEADER]<0.100>`) and the
//! response side (`UID 4 FLAGS (\Seen) BODY[] {12}...`).

use super::token::{is_atom_char, Cursor};
use super::SyntaxError;

/// One requested data item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchItem {
    /// Upper-cased item name without section, e.g. `BODY.PEEK`.
    pub name: String,
    /// Section text between the brackets, upper-cased, e.g. `HEADER.FIELDS (FROM)`.
    pub section: Option<String>,
    /// `<origin.count>`.
    pub partial: Option<(u32, u32)>,
}

impl FetchItem {
    pub fn simple(name: &str) -> Self {
        FetchItem {
            name: name.to_string(),
            section: None,
            partial: None,
        }
    }

    /// True for items that set `\Seen` when fetched.
    pub fn sets_seen(&self) -> bool {
        match self.name.as_str() {
            "BODY" => self.section.is_some(),
            "RFC822" | "RFC822.TEXT" => true,
            _ => false,
        }
    }
}

/// Parses the item list of a FETCH command: a macro, a single item or a
/// parenthesised list.
pub fn parse_fetch_items(text: &[u8]) -> Result<Vec<FetchItem>, SyntaxError> {
    let mut buf = text.to_vec();
    buf.extend_from_slice(b"\r\n");
    let mut c = Cursor::new(&buf);
    let mut items = Vec::new();
    if c.eat(b'(') {
        loop {
            items.push(item(&mut c, false)?);
            if c.eat(b')') {
                break;
            }
            c.sp()?;
        }
    } else {
        let first = item(&mut c, false)?;
        let mac = |names: &[&str]| names.iter().map(|n| FetchItem::simple(n)).collect::<Vec<_>>();
        match (first.name.as_str(), first.section.is_none()) {
            ("ALL", true) => items = mac(&["FLAGS", "INTERNALDATE", "RFC822.SIZE", "ENVELOPE"]),
            ("FAST", true) => items = mac(&["FLAGS", "INTERNALDATE", "RFC822.SIZE"]),
            ("FULL", true) => items = mac(&["FLAGS", "INTERNALDATE", "RFC822.SIZE", "ENVELOPE", "BODY"]),
            _ => items.push(first),
        }
    }
    c.expect_crlf()?;
    Ok(items)
}

/// In responses the partial marker carries only the origin (`<n>`); it is
/// returned as `(n, 0)`.
fn item(c: &mut Cursor<'_>, response: bool) -> Result<FetchItem, SyntaxError> {
    let name = c.take_while(|b| is_atom_char(b) && b != b'[' && b != b'<');
    if name.is_empty() {
        return Err(c.err("expected fetch item"));
    }
    let name = String::from_utf8(name.to_ascii_uppercase()).expect("ASCII");
    let section = if c.peek() == Some(b'[') {
        Some(String::from_utf8_lossy(&section(c)?).to_ascii_uppercase())
    } else {
        None
    };
    let partial = if c.eat(b'<') {
        let origin = c.number()?;
        let count = if response {
            0
        } else {
            c.expect(b'.')?;
            c.number()?
        };
        c.expect(b'>')?;
        Some((origin, count))
    } else {
        None
    };
    Ok(FetchItem {
        name,
        section,
        partial,
    })
}

/// Reads `[...]` and returns the inside, allowing nested parentheses and
/// quoted strings.
fn section(c: &mut Cursor<'_>) -> Result<Vec<u8>, SyntaxError> {
    c.expect(b'[')?;
    let mut out = Vec::new();
    loop {
        match c.peek() {
            None | Some(b'\r') => return Err(c.err("unterminated section")),
            Some(b']') => {
                c.advance(1);
                return Ok(out);
            }
            Some(b'"') => {
                let q = c.quoted()?;
                out.push(b'"');
                out.extend_from_slice(&q);
                out.push(b'"');
            }
            Some(b) => {
                out.push(b);
                c.advance(1);
            }
        }
    }
}

/// A value in a FETCH response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Nil,
    Number(u64),
    /// Quoted string or literal.
    String(Vec<u8>),
    /// Bare atom or flag such as `\Seen`.
    Atom(String),
    List(Vec<Value>),
}

impl Value {
    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_number(&self) -> Option<u64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }
}

/// One attribute of a FETCH response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchAttr {
    pub name: String,
    pub section: Option<String>,
    /// Origin octet from `BODY[...]<n>`.
    pub origin: Option<u32>,
    pub value: Value,
}

/// Parses the parenthesised attribute list of an untagged FETCH response.
pub fn parse_fetch_attrs(attrs: &[u8]) -> Result<Vec<FetchAttr>, SyntaxError> {
    let mut buf = attrs.to_vec();
    buf.extend_from_slice(b"\r\n");
    let mut c = Cursor::new(&buf);
    c.expect(b'(')?;
    let mut out = Vec::new();
    if !c.eat(b')') {
        loop {
            let it = item(&mut c, true)?;
            let origin = it.partial.map(|(o, _)| o);
            c.sp()?;
            let value = value(&mut c)?;
            out.push(FetchAttr {
                name: it.name,
                section: it.section,
                origin,
                value,
            });
            if c.eat(b')') {
                break;
            }
            c.sp()?;
        }
    }
    c.expect_crlf()?;
    Ok(out)
}

fn value(c: &mut Cursor<'_>) -> Result<Value, SyntaxError> {
    match c.peek() {
        Some(b'(') => {
            c.advance(1);
            let mut items = Vec::new();
            if c.eat(b')') {
                return Ok(Value::List(items));
            }
            loop {
                items.push(value(c)?);
                if c.eat(b')') {
                    return Ok(Value::List(items));
                }
                c.sp()?;
            }
        }
        Some(b'"') | Some(b'{') => c.string().map(Value::String),
        Some(b) if b.is_ascii_digit() => c.number64().map(Value::Number),
        Some(b'\\') => {
            c.advance(1);
            let rest = if c.eat(b'*') { &b"*"[..] } else { c.atom()? };
            Ok(Value::Atom(format!("\\{}", String::from_utf8_lossy(rest))))
        }
        _ => {
            let a = c.atom()?;
            if a.eq_ignore_ascii_case(b"NIL") {
                Ok(Value::Nil)
            } else {
                Ok(Value::Atom(String::from_utf8_lossy(a).into_owned()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_items() {
        let items = parse_fetch_items(b"(UID FLAGS BODY.PEEK[HEADER.FIELDS (FROM SUBJECT)] body.peek[TEXT]<0.196608>)").unwrap();
        assert_eq!(items.len(), 4);
        assert_eq!(items[2].name, "BODY.PEEK");
        assert_eq!(items[2].section.as_deref(), Some("HEADER.FIELDS (FROM SUBJECT)"));
        assert_eq!(items[3].partial, Some((0, 196608)));
        assert_eq!(parse_fetch_items(b"FAST").unwrap().len(), 3);
        assert_eq!(parse_fetch_items(b"BODY[]").unwrap()[0].section.as_deref(), Some(""));
        assert!(parse_fetch_items(b"(UID").is_err());
        assert!(parse_fetch_items(b"").is_err());
    }

    #[test]
    fn seen_side_effect() {
        assert!(parse_fetch_items(b"BODY[]").unwrap()[0].sets_seen());
        assert!(parse_fetch_items(b"RFC822").unwrap()[0].sets_seen());
        assert!(!parse_fetch_items(b"BODY.PEEK[]").unwrap()[0].sets_seen());
        assert!(!parse_fetch_items(b"BODY").unwrap()[0].sets_seen());
        assert!(!parse_fetch_items(b"RFC822.HEADER").unwrap()[0].sets_seen());
    }

    #[test]
    fn response_attrs() {
        let attrs = parse_fetch_attrs(
            b"(UID 40 FLAGS (\\Seen \\*) BODY[HEADER.FIELDS (FROM)] {5}\r\nFrom: BODY[TEXT]<0> \"x\" X NIL)",
        )
        .unwrap();
        assert_eq!(attrs[0].value, Value::Number(40));
        assert_eq!(
            attrs[1].value,
            Value::List(vec![Value::Atom("\\Seen".into()), Value::Atom("\\*".into())])
        );
        assert_eq!(attrs[2].section.as_deref(), Some("HEADER.FIELDS (FROM)"));
        assert_eq!(attrs[2].value.as_bytes(), Some(&b"From:"[..]));
        assert_eq!(attrs[3].origin, Some(0));
        assert_eq!(attrs[4].name, "X");
        assert_eq!(attrs[4].value, Value::Nil);
    }
}
