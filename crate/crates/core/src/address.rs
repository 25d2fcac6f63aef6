//! Bare `local@domain` addresses, normalized to lowercase.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A syntactically valid addr-spec, stored lowercase.
///
/// Only the dot-atom forms are accepted on both sides of the `@`, plus
/// bracketed domain literals. Quoted local parts are rejected.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Address(String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid address: {0:?}")]
pub struct InvalidAddress(pub String);

impl Address {
    pub fn parse(input: &str) -> Result<Self, InvalidAddress> {
        let trimmed = input.trim();
        if is_addr_spec(trimmed) {
            Ok(Address(trimmed.to_ascii_lowercase()))
        } else {
            Err(InvalidAddress(input.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Address {
    type Error = InvalidAddress;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Address::parse(&value)
    }
}

impl From<Address> for String {
    fn from(value: Address) -> Self {
        value.0
    }
}

impl AsRef<str> for Address {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

fn is_atext(c: u8) -> bool {
    c.is_ascii_alphanumeric() || b"!#$%&'*+-/=?^_`{|}~".contains(&c)
}

fn is_dot_atom(s: &str) -> bool {
    !s.is_empty()
        && s.split('.')
            .all(|part| !part.is_empty() && part.bytes().all(is_atext))
}

fn is_domain(s: &str) -> bool {
    if let Some(inner) = s.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
        return !inner.is_empty()
            && inner
                .bytes()
                .all(|c| (33..=126).contains(&c) && c != b'[' && c != b']' && c != b'\\');
    }
    !s.is_empty()
        && s.len() <= 253
        && s.split('.').all(|label| {
            !label.is_empty()
                && label.len() <= 63
                && label.bytes().all(|c| c.is_ascii_alphanumeric() || c == b'-')
                && !label.starts_with('-')
                && !label.ends_with('-')
        })
}

/// True when `s` is exactly `local@domain` with no surrounding text.
pub fn is_addr_spec(s: &str) -> bool {
    let Some((local, domain)) = s.rsplit_once('@') else {
        return false;
    };
    local.len() <= 64 && is_dot_atom(local) && is_domain(domain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_and_lowercases() {
        let a = Address::parse("EX@Gmail.COM").unwrap();
        assert_eq!(a.as_str(), "ex@gmail.com");
        assert!(Address::parse("boss@co").is_ok());
        assert!(Address::parse("a.b+tag@[127.0.0.1]").is_ok());
    }

    #[test]
    fn rejects_garbage() {
        for bad in [
            "",
            "nobody",
            "@x.y",
            "x@",
            "a@@b",
            "a..b@c",
            ".a@b",
            "a b@c",
            "Name <a@b>",
            "a@-bad.com",
            "\"quoted\"@x.y",
        ] {
            assert!(Address::parse(bad).is_err(), "{bad:?} accepted");
        }
    }

    #[test]
    fn serde_validates() {
        let ok: Address = serde_json::from_str("\"Person@Gmail.com\"").unwrap();
        assert_eq!(ok.as_str(), "person@gmail.com");
        assert!(serde_json::from_str::<Address>("\"not an address\"").is_err());
    }
}
