use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {reason}")]
    Line { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureMessage {
    pub uid: u32,
    pub flags: Vec<String>,
    pub raw: Vec<u8>,
}

impl FixtureMessage {
    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f.eq_ignore_ascii_case(flag))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureMailbox {
    pub name: String,
    pub messages: Vec<FixtureMessage>,
    pub uidvalidity: u32,
    pub uidnext: u32,
}

pub const MANIFEST_FILE: &str = "manifest";

impl FixtureMailbox {
    pub fn new(name: &str, uidvalidity: u32) -> Self {
        FixtureMailbox {
            name: name.to_string(),
            messages: Vec::new(),
            uidvalidity,
            uidnext: 1,
        }
    }

    /// Appends a message under the next UID and returns that UID.
    pub fn push(&mut self, raw: impl Into<Vec<u8>>, flags: &[&str]) -> u32 {
        let uid = self.uidnext;
        self.messages.push(FixtureMessage {
            uid,
            flags: flags.iter().map(|f| f.to_string()).collect(),
            raw: raw.into(),
        });
        self.uidnext += 1;
        uid
    }

    /// Appends a message with an explicit UID, which must exceed every UID
    /// already present.
    pub fn push_with_uid(&mut self, uid: u32, flags: Vec<String>, raw: Vec<u8>) -> Result<(), String> {
        if uid == 0 || self.messages.last().is_some_and(|m| m.uid >= uid) {
            return Err(format!("uid {uid} does not increase"));
        }
        self.messages.push(FixtureMessage { uid, flags, raw });
        self.uidnext = self.uidnext.max(uid + 1);
        Ok(())
    }

    pub fn by_uid(&self, uid: u32) -> Option<&FixtureMessage> {
        self.messages.iter().find(|m| m.uid == uid)
    }

    /// Loads `dir/manifest`: one `uid flags filename` line per message, in
    /// order. Flags are comma separated, `-` for none. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn load_fixture(dir: &Path, name: &str) -> Result<Self, ManifestError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|source| ManifestError::Io {
            path: manifest_path.clone(),
            source,
        })?;
        let mut mailbox = FixtureMailbox::new(name, 1);
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| ManifestError::Line {
                line: line_no,
                reason,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [uid, flags, file] = fields[..] else {
                return Err(bad("expected `uid flags filename`".into()));
            };
            let uid: u32 = uid.parse().map_err(|_| bad(format!("bad uid {uid:?}")))?;
            let flags = if flags == "-" {
                Vec::new()
            } else {
                flags.split(',').map(str::to_string).collect()
            };
            let path = dir.join(file);
            let raw = fs::read(&path).map_err(|source| ManifestError::Io { path, source })?;
            mailbox.push_with_uid(uid, flags, raw).map_err(bad)?;
        }
        Ok(mailbox)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, manifest: &str) {
        fs::write(dir.join(MANIFEST_FILE), manifest).unwrap();
        fs::write(dir.join("a.eml"), "From: a@x.org\r\n\r\nhi\r\n").unwrap();
        fs::write(dir.join("b.eml"), "From: b@x.org\r\n\r\nyo\r\n").unwrap();
    }

    #[test]
    fn loads_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "# test\n3 \\Seen,\\Flagged a.eml\n\n9 - b.eml\n");
        let m = FixtureMailbox::load_fixture(dir.path(), "INBOX").unwrap();
        assert_eq!(m.messages.len(), 2);
        assert_eq!(m.messages[0].flags, ["\\Seen", "\\Flagged"]);
        assert!(m.messages[1].flags.is_empty());
        assert_eq!(m.uidnext, 10);
    }

    #[test]
    fn empty_and_invalid() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "");
        assert!(FixtureMailbox::load_fixture(dir.path(), "INBOX").unwrap().messages.is_empty());
        write(dir.path(), "5 - a.eml\n5 - b.eml\n");
        assert!(matches!(
            FixtureMailbox::load_fixture(dir.path(), "INBOX"),
            Err(ManifestError::Line { line: 2, .. })
        ));
        write(dir.path(), "1 - missing.eml\n");
        assert!(matches!(FixtureMailbox::load_fixture(dir.path(), "INBOX"), Err(ManifestError::Io { .. })));
        write(dir.path(), "1 a.eml\n");
        assert!(FixtureMailbox::load_fixture(dir.path(), "INBOX").is_err());
    }
}
