use base64::alphabet;
use base64::engine::{DecodePaddingMode, GeneralPurpose, GeneralPurposeConfig};
use base64::Engine;
use mailparse::{body::Body, MailAddr, MailHeaderMap, ParsedMail};

use crate::address::Address;

/// Cap on the decoded text kept for keyword matching.
pub const BODY_EXCERPT_LIMIT: usize = 64 * 1024;

/// Only this many raw body bytes (after the header block) are ever looked at.
/// Sized so that a base64 part can still yield a full excerpt.
pub const RAW_BODY_WINDOW: usize = 192 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Sender {
    Address(Address),
    /// From header missing or not parseable into an addr-spec.
    Unparseable,
}

/// Everything the policy engine looks at for one message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageMeta {
    pub sender: Sender,
    /// Unfolded Subject value, not RFC 2047 decoded.
    pub subject: String,
    pub body_excerpt: String,
}

/// Splits a message at the first empty line. The header part keeps its
/// terminating blank line; a message without one is all header.
pub fn split_header_body(raw: &[u8]) -> (&[u8], &[u8]) {
    if raw.starts_with(b"\r\n") {
        return raw.split_at(2);
    }
    if raw.starts_with(b"\n") {
        return raw.split_at(1);
    }
    let crlf = find(raw, b"\r\n\r\n").map(|i| i + 4);
    let lf = find(raw, b"\n\n").map(|i| i + 2);
    let at = match (crlf, lf) {
        (Some(a), Some(b)) => a.min(b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => raw.len(),
    };
    raw.split_at(at)
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Extracts sender, subject and a decoded body excerpt. Never fails: a
/// missing or garbled From yields [`Sender::Unparseable`], missing parts
/// yield empty strings.
pub fn extract_meta(raw: &[u8]) -> MessageMeta {
    let (header, body) = split_header_body(raw);
    let body = &body[..body.len().min(RAW_BODY_WINDOW)];
    let mut windowed = Vec::with_capacity(header.len() + body.len());
    windowed.extend_from_slice(header);
    windowed.extend_from_slice(body);

    let Ok(mail) = mailparse::parse_mail(&windowed) else {
        return MessageMeta {
            sender: Sender::Unparseable,
            subject: String::new(),
            body_excerpt: String::new(),
        };
    };

    let sender = mail
        .headers
        .get_first_header("From")
        .and_then(|h| mailparse::addrparse_header(h).ok())
        .and_then(|list| {
            list.iter().find_map(|a| match a {
                MailAddr::Single(s) => Some(s.addr.clone()),
                MailAddr::Group(g) => g.addrs.first().map(|s| s.addr.clone()),
            })
        })
        .and_then(|a| Address::parse(&a).ok())
        .map(Sender::Address)
        .unwrap_or(Sender::Unparseable);

    let subject = mail
        .headers
        .get_first_header("Subject")
        .map(|h| unfold(h.get_value_raw()))
        .unwrap_or_default();

    let body_excerpt = first_text_plain(&mail)
        .map(|part| truncate_chars(decode_text(part), BODY_EXCERPT_LIMIT))
        .unwrap_or_default();

    MessageMeta {
        sender,
        subject,
        body_excerpt,
    }
}

fn unfold(value: &[u8]) -> String {
    let text = String::from_utf8_lossy(value);
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\r' if chars.peek() == Some(&'\n') => {}
            '\n' => {}
            _ => out.push(c),
        }
    }
    out.trim().to_string()
}

fn first_text_plain<'a>(part: &'a ParsedMail<'a>) -> Option<&'a ParsedMail<'a>> {
    if part.ctype.mimetype.starts_with("multipart/") {
        return part.subparts.iter().find_map(first_text_plain);
    }
    (part.ctype.mimetype == "text/plain").then_some(part)
}

fn decode_text(part: &ParsedMail<'_>) -> String {
    let bytes = match part.get_body_encoded() {
        Body::Base64(b) => match b.get_decoded() {
            Ok(v) => v,
            Err(_) => lenient_base64(b.get_raw()),
        },
        Body::QuotedPrintable(b) => b.get_decoded().unwrap_or_else(|_| b.get_raw().to_vec()),
        Body::SevenBit(b) | Body::EightBit(b) => b.get_raw().to_vec(),
        Body::Binary(b) => b.get_raw().to_vec(),
    };
    let charset = part.ctype.charset.to_ascii_lowercase();
    if matches!(charset.as_str(), "us-ascii" | "utf-8" | "utf8" | "") {
        return String::from_utf8_lossy(&bytes).into_owned();
    }
    // Reuse mailparse's charset handling for everything else.
    match part.get_body() {
        Ok(s) => s,
        Err(_) => String::from_utf8_lossy(&bytes).into_owned(),
    }
}

/// Decodes as much base64 as possible, ignoring junk and a truncated tail.
fn lenient_base64(raw: &[u8]) -> Vec<u8> {
    let mut clean: Vec<u8> = raw
        .iter()
        .copied()
        .filter(|c| c.is_ascii_alphanumeric() || *c == b'+' || *c == b'/')
        .collect();
    clean.truncate(clean.len() / 4 * 4);
    let engine = GeneralPurpose::new(
        &alphabet::STANDARD,
        GeneralPurposeConfig::new().with_decode_padding_mode(DecodePaddingMode::Indifferent),
    );
    engine.decode(&clean).unwrap_or_default()
}

fn truncate_chars(mut s: String, max_bytes: usize) -> String {
    if s.len() > max_bytes {
        let mut cut = max_bytes;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
    }
    s
}
