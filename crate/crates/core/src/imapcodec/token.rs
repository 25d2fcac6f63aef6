//! Byte cursor over one fully framed command or response (literal data inline).

use super::SyntaxError;

pub(crate) fn is_atom_char(c: u8) -> bool {
    c > 0x20 && c < 0x7f && !b"(){%*\"\\]".contains(&c)
}

pub(crate) fn is_astring_char(c: u8) -> bool {
    is_atom_char(c) || c == b']'
}

pub(crate) fn is_tag_char(c: u8) -> bool {
    is_astring_char(c) && c != b'+'
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn peek(&self) -> Option<u8> {
        self.buf.get(self.pos).copied()
    }

    pub fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    pub fn advance(&mut self, n: usize) {
        self.pos = (self.pos + n).min(self.buf.len());
    }

    pub fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    pub fn expect(&mut self, b: u8) -> Result<(), SyntaxError> {
        if self.eat(b) {
            Ok(())
        } else {
            Err(self.err(format!("expected {:?}", b as char)))
        }
    }

    pub fn sp(&mut self) -> Result<(), SyntaxError> {
        self.expect(b' ')
    }

    pub fn err(&self, what: impl Into<String>) -> SyntaxError {
        SyntaxError::new(format!("{} at byte {}", what.into(), self.pos))
    }

    /// True if only the terminating CRLF remains.
    pub fn at_crlf(&self) -> bool {
        self.rest() == b"\r\n"
    }

    pub fn expect_crlf(&mut self) -> Result<(), SyntaxError> {
        if self.at_crlf() {
            self.pos = self.buf.len();
            Ok(())
        } else {
            Err(self.err("expected end of line"))
        }
    }

    /// Everything up to (not including) the final CRLF.
    pub fn take_until_crlf(&mut self) -> Result<&'a [u8], SyntaxError> {
        let rest = self.rest();
        if !rest.ends_with(b"\r\n") {
            return Err(self.err("missing CRLF"));
        }
        let body = &rest[..rest.len() - 2];
        self.pos = self.buf.len();
        Ok(body)
    }

    pub fn take_while(&mut self, f: impl Fn(u8) -> bool) -> &'a [u8] {
        let start = self.pos;
        while self.peek().is_some_and(&f) {
            self.pos += 1;
        }
        &self.buf[start..self.pos]
    }

    pub fn atom(&mut self) -> Result<&'a [u8], SyntaxError> {
        let a = self.take_while(is_atom_char);
        if a.is_empty() {
            Err(self.err("expected atom"))
        } else {
            Ok(a)
        }
    }

    pub fn number(&mut self) -> Result<u32, SyntaxError> {
        let d = self.take_while(|c| c.is_ascii_digit());
        std::str::from_utf8(d)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("expected number"))
    }

    pub fn number64(&mut self) -> Result<u64, SyntaxError> {
        let d = self.take_while(|c| c.is_ascii_digit());
        std::str::from_utf8(d)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("expected number"))
    }

    pub fn quoted(&mut self) -> Result<Vec<u8>, SyntaxError> {
        self.expect(b'"')?;
        let mut out = Vec::new();
        loop {
            match self.peek() {
                None | Some(b'\r') | Some(b'\n') => return Err(self.err("unterminated quoted string")),
                Some(b'"') => {
                    self.pos += 1;
                    return Ok(out);
                }
                Some(b'\\') => {
                    self.pos += 1;
                    match self.peek() {
                        Some(c @ (b'"' | b'\\')) => {
                            out.push(c);
                            self.pos += 1;
                        }
                        _ => return Err(self.err("bad escape in quoted string")),
                    }
                }
                Some(c) => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
    }

    /// `{n}\r\n` or `{n+}\r\n` followed by n bytes.
    pub fn literal(&mut self) -> Result<&'a [u8], SyntaxError> {
        self.expect(b'{')?;
        let n = self.number64()? as usize;
        self.eat(b'+');
        self.expect(b'}')?;
        self.expect(b'\r')?;
        self.expect(b'\n')?;
        if self.rest().len() < n {
            return Err(self.err("literal shorter than announced"));
        }
        let data = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(data)
    }

    pub fn string(&mut self) -> Result<Vec<u8>, SyntaxError> {
        match self.peek() {
            Some(b'"') => self.quoted(),
            Some(b'{') => self.literal().map(<[u8]>::to_vec),
            _ => Err(self.err("expected string")),
        }
    }

    pub fn astring(&mut self) -> Result<Vec<u8>, SyntaxError> {
        match self.peek() {
            Some(b'"') | Some(b'{') => self.string(),
            _ => {
                let a = self.take_while(is_astring_char);
                if a.is_empty() {
                    Err(self.err("expected astring"))
                } else {
                    Ok(a.to_vec())
                }
            }
        }
    }

    /// Like [`astring`](Self::astring) but returns the raw encoded bytes.
    pub fn astring_raw(&mut self) -> Result<&'a [u8], SyntaxError> {
        let start = self.pos;
        self.astring()?;
        Ok(&self.buf[start..self.pos])
    }
}

/// Encodes `value` as an atom, quoted string, or literal, whichever is the
/// simplest form that can represent it.
pub fn encode_astring(value: &[u8], out: &mut Vec<u8>) {
    if !value.is_empty() && value.iter().all(|&c| is_astring_char(c)) {
        out.extend_from_slice(value);
    } else if value
        .iter()
        .all(|&c| c != b'\r' && c != b'\n' && c != 0 && c < 0x80)
    {
        out.push(b'"');
        for &c in value {
            if c == b'"' || c == b'\\' {
                out.push(b'\\');
            }
            out.push(c);
        }
        out.push(b'"');
    } else {
        out.extend_from_slice(format!("{{{}}}\r\n", value.len()).as_bytes());
        out.extend_from_slice(value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round(v: &[u8]) -> Vec<u8> {
        let mut enc = Vec::new();
        encode_astring(v, &mut enc);
        enc.extend_from_slice(b"\r\n");
        let mut c = Cursor::new(&enc);
        let back = c.astring().unwrap();
        c.expect_crlf().unwrap();
        back
    }

    #[test]
    fn astring_forms() {
        for v in [
            &b"INBOX"[..],
            b"with space",
            b"q\"uo\\te",
            b"",
            b"line\r\nbreak",
            "caf\u{e9}".as_bytes(),
            b"a]b",
        ] {
            assert_eq!(round(v), v);
        }
        let mut enc = Vec::new();
        encode_astring(b"two words", &mut enc);
        assert_eq!(enc, b"\"two words\"");
    }

    #[test]
    fn literal_bounds() {
        let mut c = Cursor::new(b"{5}\r\nabc");
        assert!(c.literal().is_err());
        let mut c = Cursor::new(b"{3+}\r\nabc\r\n");
        assert_eq!(c.literal().unwrap(), b"abc");
        assert!(c.at_crlf());
    }
}
