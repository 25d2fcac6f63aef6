//! The proxy's own connection to the real IMAP server.

use std::io;
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use rustls::ClientConfig;

use super::config::Endpoint;
use super::tls::{Conn, Duplex};
use super::SessionError;
use crate::imapcodec::wire::{make_literals_synchronizing, read_frame, split_at_sync_literals};
use crate::imapcodec::{encode_astring, Status};

pub const MAX_UPSTREAM_LINE: usize = 1 << 20;
pub const MAX_UPSTREAM_LITERAL: u64 = 64 << 20;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(15);
const IO_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub status: Status,
    pub text: String,
}

impl Completion {
    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }
}

pub struct Upstream {
    io: Duplex,
    next_tag: u64,
}

impl Upstream {
    /// Connects and consumes the greeting.
    pub fn connect(ep: &Endpoint, tls: &Arc<ClientConfig>) -> io::Result<Upstream> {
        use std::net::ToSocketAddrs;
        let addrs: Vec<_> = (ep.host.as_str(), ep.port).to_socket_addrs()?.collect();
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no address for upstream host");
        let mut tcp = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
                Ok(s) => {
                    tcp = Some(s);
                    break;
                }
                Err(e) => last = e,
            }
        }
        let tcp = tcp.ok_or(last)?;
        tcp.set_read_timeout(Some(IO_TIMEOUT))?;
        tcp.set_write_timeout(Some(IO_TIMEOUT))?;
        tcp.set_nodelay(true)?;
        let conn = if ep.use_tls {
            Conn::connect_tls(tcp, &ep.host, Arc::clone(tls))?
        } else {
            Conn::Plain(tcp)
        };
        let mut up = Upstream {
            io: Duplex::new(conn),
            next_tag: 1,
        };
        let greeting = up.read_frame()?;
        if !greeting.starts_with(b"* OK") {
            return Err(io::Error::new(io::ErrorKind::ConnectionRefused, "upstream refused the session"));
        }
        Ok(up)
    }

    pub fn read_frame(&mut self) -> io::Result<Vec<u8>> {
        read_frame(&mut self.io, MAX_UPSTREAM_LINE, MAX_UPSTREAM_LITERAL)
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.io.send(bytes)
    }

    pub fn shutdown(&mut self) {
        self.io.shutdown();
    }

    fn tag(&mut self) -> String {
        let t = format!("P{}", self.next_tag);
        self.next_tag += 1;
        t
    }

    /// Logs in with the stored upstream credential. A rejection is
    /// reported as `Ok(false)`.
    pub fn login(&mut self, user: &str, password: &str) -> Result<bool, SessionError> {
        let mut body = b"LOGIN ".to_vec();
        encode_astring(user.as_bytes(), &mut body);
        body.push(b' ');
        encode_astring(password.as_bytes(), &mut body);
        let done = self.run(&body, &mut |_| Ok(()))?;
        Ok(done.is_ok())
    }

    /// Sends a command under a fresh internal tag and reads until its
    /// completion, handing every untagged frame to `on_untagged`.
    pub fn run(
        &mut self,
        body: &[u8],
        on_untagged: &mut dyn FnMut(&[u8]) -> Result<(), SessionError>,
    ) -> Result<Completion, SessionError> {
        let tag = self.tag();
        let mut cmd = format!("{tag} ").into_bytes();
        cmd.extend_from_slice(body);
        cmd.extend_from_slice(b"\r\n");
        let cmd = make_literals_synchronizing(&cmd);
        let pieces = split_at_sync_literals(&cmd);
        let last = pieces.len() - 1;
        let prefix = format!("{tag} ");
        for (i, piece) in pieces.iter().enumerate() {
            self.send_raw(piece)?;
            loop {
                let frame = self.read_frame()?;
                if frame.starts_with(b"+") {
                    if i < last {
                        break;
                    }
                    return Err(SessionError::Protocol("unexpected continuation".into()));
                }
                if let Some(rest) = frame.strip_prefix(prefix.as_bytes()) {
                    return completion(rest);
                }
                if frame.starts_with(b"* ") {
                    on_untagged(&frame)?;
                } else {
                    return Err(SessionError::Protocol("unexpected tagged response".into()));
                }
            }
        }
        unreachable!("the last piece always ends in a completion or an error")
    }

    /// Best-effort LOGOUT and close.
    pub fn logout(&mut self) {
        let _ = self.run(b"LOGOUT", &mut |_| Ok(()));
        self.shutdown();
    }
}

fn completion(rest: &[u8]) -> Result<Completion, SessionError> {
    let text = String::from_utf8_lossy(rest);
    let text = text.trim_end_matches(['\r', '\n']);
    let (word, text) = text.split_once(' ').unwrap_or((text, ""));
    let status = match word.to_ascii_uppercase().as_str() {
        "OK" => Status::Ok,
        "NO" => Status::No,
        "BAD" => Status::Bad,
        _ => return Err(SessionError::Protocol("malformed completion".into())),
    };
    Ok(Completion {
        status,
        text: text.to_string(),
    })
}
