//! Line and literal framing on byte streams.

use std::io::{self, BufRead, Read, Write};

use super::{CodecError, MAX_LITERAL};

/// A literal announcement at the end of a line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiteralMarker {
    pub len: u64,
    /// `{n}` needs a continuation before the data is sent; `{n+}` does not.
    pub synchronizing: bool,
    /// Offset of the opening `{` within the line.
    pub start: usize,
}

/// Returns the literal announced at the end of `line` (which includes its
/// line terminator), if any.
pub fn trailing_literal(line: &[u8]) -> Option<LiteralMarker> {
    let body = line
        .strip_suffix(b"\r\n")
        .or_else(|| line.strip_suffix(b"\n"))?;
    let inner = body.strip_suffix(b"}")?;
    let open = inner.iter().rposition(|&c| c == b'{')?;
    let spec = &inner[open + 1..];
    let (digits, synchronizing) = match spec.strip_suffix(b"+") {
        Some(d) => (d, false),
        None => (spec, true),
    };
    if digits.is_empty() || !digits.iter().all(u8::is_ascii_digit) {
        return None;
    }
    // Anything that does not fit is simply too large.
    let len = std::str::from_utf8(digits).ok()?.parse().unwrap_or(u64::MAX);
    Some(LiteralMarker {
        len,
        synchronizing,
        start: open,
    })
}

/// Reads one line including its terminator. Fails on EOF and on lines
/// longer than `max` bytes.
pub fn read_line<R: BufRead + ?Sized>(reader: &mut R, max: usize) -> io::Result<Vec<u8>> {
    let mut line = Vec::new();
    loop {
        let buf = reader.fill_buf()?;
        if buf.is_empty() {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"));
        }
        match buf.iter().position(|&c| c == b'\n') {
            Some(i) => {
                line.extend_from_slice(&buf[..=i]);
                reader.consume(i + 1);
                if line.len() > max {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, "line too long"));
                }
                return Ok(line);
            }
            None => {
                let n = buf.len();
                line.extend_from_slice(buf);
                reader.consume(n);
                if line.len() > max {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, "line too long"));
                }
            }
        }
    }
}

/// Reads exactly `len` bytes.
pub fn read_exact_vec<R: Read + ?Sized>(reader: &mut R, len: usize) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    reader.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a complete response frame: a line plus any literals it announces
/// and the lines that follow them. Literals above `max_literal` are an error
/// and are not read.
pub fn read_frame<R: BufRead + ?Sized>(
    reader: &mut R,
    max_line: usize,
    max_literal: u64,
) -> io::Result<Vec<u8>> {
    let mut frame = read_line(reader, max_line)?;
    let mut line_start = 0;
    while let Some(lit) = trailing_literal(&frame[line_start..]) {
        if lit.len > max_literal {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("literal of {} bytes exceeds limit", lit.len),
            ));
        }
        let data = read_exact_vec(reader, lit.len as usize)?;
        frame.extend_from_slice(&data);
        line_start = frame.len();
        frame.extend_from_slice(&read_line(reader, max_line)?);
    }
    Ok(frame)
}

/// Supplies the bytes that follow a literal announcement while a command is
/// being assembled.
pub trait LiteralSource {
    /// Returns exactly `len` literal bytes followed by the next line
    /// (through its CRLF).
    fn continue_literal(&mut self, len: usize, synchronizing: bool) -> Result<Vec<u8>, CodecError>;
}

/// A source that refuses literals; for commands known to be one line.
pub struct NoLiterals;

impl LiteralSource for NoLiterals {
    fn continue_literal(&mut self, _len: usize, _sync: bool) -> Result<Vec<u8>, CodecError> {
        Err(CodecError::syntax(None, "unexpected literal"))
    }
}

/// A source backed by an in-memory byte slice holding the rest of the stream.
pub struct SliceSource<'a> {
    rest: &'a [u8],
}

impl<'a> SliceSource<'a> {
    pub fn new(rest: &'a [u8]) -> Self {
        SliceSource { rest }
    }

    pub fn remaining(&self) -> &'a [u8] {
        self.rest
    }
}

impl LiteralSource for SliceSource<'_> {
    fn continue_literal(&mut self, len: usize, _sync: bool) -> Result<Vec<u8>, CodecError> {
        if self.rest.len() < len {
            return Err(CodecError::syntax(None, "truncated literal"));
        }
        let after = &self.rest[len..];
        let nl = after
            .iter()
            .position(|&c| c == b'\n')
            .ok_or_else(|| CodecError::syntax(None, "missing line after literal"))?;
        let take = len + nl + 1;
        let out = self.rest[..take].to_vec();
        self.rest = &self.rest[take..];
        Ok(out)
    }
}

/// Reads literals from a client connection, sending the `+` continuation
/// for synchronizing literals.
pub struct StreamSource<'a, S: BufRead + Write + ?Sized> {
    pub stream: &'a mut S,
    pub max_line: usize,
}

impl<S: BufRead + Write + ?Sized> LiteralSource for StreamSource<'_, S> {
    fn continue_literal(&mut self, len: usize, synchronizing: bool) -> Result<Vec<u8>, CodecError> {
        if synchronizing {
            self.stream.write_all(b"+ Ready for literal data\r\n")?;
            self.stream.flush()?;
        }
        let mut out = read_exact_vec(self.stream, len)?;
        out.extend_from_slice(&read_line(self.stream, self.max_line)?);
        Ok(out)
    }
}

/// Splits an encoded command into the pieces that must be sent separately:
/// every piece except the last ends with a synchronizing literal
/// announcement, after which the sender must wait for a continuation.
pub fn split_at_sync_literals(bytes: &[u8]) -> Vec<&[u8]> {
    let mut pieces = Vec::new();
    let mut piece_start = 0;
    let mut pos = 0;
    while pos < bytes.len() {
        let Some(nl) = bytes[pos..].iter().position(|&c| c == b'\n') else {
            break;
        };
        let line_end = pos + nl + 1;
        match trailing_literal(&bytes[pos..line_end]) {
            Some(lit) => {
                if lit.synchronizing {
                    pieces.push(&bytes[piece_start..line_end]);
                    piece_start = line_end;
                }
                pos = line_end.saturating_add(lit.len as usize).min(bytes.len());
            }
            None => pos = line_end,
        }
    }
    if piece_start < bytes.len() {
        pieces.push(&bytes[piece_start..]);
    }
    pieces
}

/// Rewrites every `{n+}` announcement as `{n}`.
pub fn make_literals_synchronizing(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut pos = 0;
    while pos < bytes.len() {
        let Some(nl) = bytes[pos..].iter().position(|&c| c == b'\n') else {
            out.extend_from_slice(&bytes[pos..]);
            break;
        };
        let line_end = pos + nl + 1;
        let line = &bytes[pos..line_end];
        match trailing_literal(line) {
            Some(lit) => {
                if lit.synchronizing {
                    out.extend_from_slice(line);
                } else {
                    out.extend_from_slice(&line[..lit.start]);
                    out.extend_from_slice(format!("{{{}}}\r\n", lit.len).as_bytes());
                }
                let data_end = line_end.saturating_add(lit.len as usize).min(bytes.len());
                out.extend_from_slice(&bytes[line_end..data_end]);
                pos = data_end;
            }
            None => {
                out.extend_from_slice(line);
                pos = line_end;
            }
        }
    }
    out
}

pub(crate) fn check_literal_len(len: u64, tag: Option<&str>) -> Result<usize, CodecError> {
    if len > MAX_LITERAL as u64 {
        Err(CodecError::LiteralTooLarge {
            tag: tag.map(str::to_string),
            len,
        })
    } else {
        Ok(len as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_literals() {
        assert_eq!(
            trailing_literal(b"a LOGIN {6}\r\n"),
            Some(LiteralMarker { len: 6, synchronizing: true, start: 8 })
        );
        assert_eq!(
            trailing_literal(b"a LOGIN {6+}\r\n").map(|l| l.synchronizing),
            Some(false)
        );
        assert_eq!(trailing_literal(b"a LOGIN {}\r\n"), None);
        assert_eq!(trailing_literal(b"a LOGIN x}\r\n"), None);
        assert_eq!(trailing_literal(b"a NOOP\r\n"), None);
    }

    #[test]
    fn frames_with_literals() {
        let data = b"* 1 FETCH (BODY[] {5}\r\nhello FLAGS ())\r\n* 2 EXISTS\r\n";
        let mut r = &data[..];
        let f = read_frame(&mut r, 1024, 100).unwrap();
        assert_eq!(f, b"* 1 FETCH (BODY[] {5}\r\nhello FLAGS ())\r\n");
        assert_eq!(read_frame(&mut r, 1024, 100).unwrap(), b"* 2 EXISTS\r\n");
        let mut r = &data[..];
        assert!(read_frame(&mut r, 1024, 4).is_err());
    }

    #[test]
    fn line_cap() {
        let mut r = &b"aaaaaaaaaaaaaaaa\r\n"[..];
        assert!(read_line(&mut r, 8).is_err());
        let mut r = &b"abc"[..];
        assert_eq!(read_line(&mut r, 8).unwrap_err().kind(), io::ErrorKind::UnexpectedEof);
    }

    #[test]
    fn splitting_for_upstream() {
        let cmd = b"a APPEND box {3}\r\nx\r\n {2+}\r\nab {1}\r\nz\r\n";
        let parts = split_at_sync_literals(cmd);
        assert_eq!(
            parts,
            vec![&b"a APPEND box {3}\r\n"[..], &b"x\r\n {2+}\r\nab {1}\r\n"[..], &b"z\r\n"[..]]
        );
        assert_eq!(
            make_literals_synchronizing(cmd),
            b"a APPEND box {3}\r\nx\r\n {2}\r\nab {1}\r\nz\r\n"
        );
        assert_eq!(split_at_sync_literals(b"a NOOP\r\n"), vec![&b"a NOOP\r\n"[..]]);
    }
}
