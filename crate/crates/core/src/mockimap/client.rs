use std::io::{self, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use crate::imapcodec::wire::{read_frame, split_at_sync_literals};

const MAX_LINE: usize = 1 << 20;
const MAX_LITERAL: u64 = 64 << 20;

/// The frames answering one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub untagged: Vec<Vec<u8>>,
    pub tagged: Vec<u8>,
}

impl Reply {
    /// `OK`, `NO` or `BAD`.
    pub fn status(&self) -> &str {
        let text = std::str::from_utf8(&self.tagged).unwrap_or("");
        text.split(' ').nth(1).unwrap_or("").trim_end()
    }

    pub fn is_ok(&self) -> bool {
        self.status() == "OK"
    }

    pub fn tagged_text(&self) -> String {
        String::from_utf8_lossy(&self.tagged).trim_end().to_string()
    }

    /// Untagged frames as lossy strings without the final CRLF.
    pub fn lines(&self) -> Vec<String> {
        self.untagged
            .iter()
            .map(|f| String::from_utf8_lossy(f).trim_end_matches("\r\n").to_string())
            .collect()
    }

    /// Numbers from the first `* SEARCH` response.
    pub fn search_results(&self) -> Option<Vec<u32>> {
        self.lines().iter().find_map(|l| {
            let rest = l.strip_prefix("* SEARCH")?;
            Some(rest.split_whitespace().filter_map(|n| n.parse().ok()).collect())
        })
    }

    /// Value of the first `* n EXISTS` response.
    pub fn exists(&self) -> Option<u32> {
        self.lines().iter().find_map(|l| {
            let n = l.strip_prefix("* ")?.strip_suffix(" EXISTS")?;
            n.parse().ok()
        })
    }

    pub fn fetch_count(&self) -> usize {
        self.lines()
            .iter()
            .filter(|l| l.split(' ').nth(2).is_some_and(|w| w.eq_ignore_ascii_case("FETCH")))
            .count()
    }
}

/// A minimal IMAP client for tests. Records every byte it receives.
pub struct ImapClient<S: Read + Write = TcpStream> {
    stream: BufReader<S>,
    transcript: Vec<u8>,
    next_tag: u32,
    pub greeting: Vec<u8>,
}

impl ImapClient<TcpStream> {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let s = TcpStream::connect(addr)?;
        s.set_read_timeout(Some(Duration::from_secs(20)))?;
        s.set_nodelay(true)?;
        Self::from_stream(s)
    }
}

impl<S: Read + Write> ImapClient<S> {
    /// Wraps an established stream and reads the greeting.
    pub fn from_stream(stream: S) -> io::Result<Self> {
        let mut c = ImapClient {
            stream: BufReader::new(stream),
            transcript: Vec::new(),
            next_tag: 1,
            greeting: Vec::new(),
        };
        c.greeting = c.read_frame()?;
        Ok(c)
    }

    pub fn transcript(&self) -> &[u8] {
        &self.transcript
    }

    pub fn read_frame(&mut self) -> io::Result<Vec<u8>> {
        let f = read_frame(&mut self.stream, MAX_LINE, MAX_LITERAL)?;
        self.transcript.extend_from_slice(&f);
        Ok(f)
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        let s = self.stream.get_mut();
        s.write_all(bytes)?;
        s.flush()
    }

    /// Sends `text` with an automatic tag and reads the reply.
    pub fn run(&mut self, text: &str) -> io::Result<Reply> {
        let tag = format!("t{}", self.next_tag);
        self.next_tag += 1;
        self.command(&tag, text.as_bytes())
    }

    /// Sends `<tag> <body>\r\n`, waiting for a continuation before the data
    /// of each synchronizing literal, and collects frames until the tagged
    /// completion.
    pub fn command(&mut self, tag: &str, body: &[u8]) -> io::Result<Reply> {
        let mut full = format!("{tag} ").into_bytes();
        full.extend_from_slice(body);
        full.extend_from_slice(b"\r\n");
        let pieces = split_at_sync_literals(&full);
        let mut untagged = Vec::new();
        let last = pieces.len() - 1;
        for (i, piece) in pieces.iter().enumerate() {
            self.send_raw(piece)?;
            if i == last {
                break;
            }
            loop {
                let f = self.read_frame()?;
                if f.starts_with(b"+") {
                    break;
                }
                if f.starts_with(format!("{tag} ").as_bytes()) {
                    return Ok(Reply { untagged, tagged: f });
                }
                untagged.push(f);
            }
        }
        self.finish(tag, untagged)
    }

    /// Reads frames until the tagged completion for `tag`.
    pub fn finish(&mut self, tag: &str, mut untagged: Vec<Vec<u8>>) -> io::Result<Reply> {
        let prefix = format!("{tag} ");
        loop {
            let f = self.read_frame()?;
            if f.starts_with(prefix.as_bytes()) {
                return Ok(Reply { untagged, tagged: f });
            }
            untagged.push(f);
        }
    }

    pub fn login(&mut self, user: &str, password: &str) -> io::Result<Reply> {
        self.run(&format!("LOGIN {} {}", quote(user), quote(password)))
    }

    pub fn into_inner(self) -> S {
        self.stream.into_inner()
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}
