//! Plain and TLS transports behind one duplex stream type.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::sync::Arc;

use rustls::pki_types::{CertificateDer, PrivateKeyDer, ServerName};
use rustls::{ClientConfig, ClientConnection, RootCertStore, ServerConfig, ServerConnection, StreamOwned};

pub enum Conn {
    Plain(TcpStream),
    TlsServer(Box<StreamOwned<ServerConnection, TcpStream>>),
    TlsClient(Box<StreamOwned<ClientConnection, TcpStream>>),
}

impl Conn {
    pub fn tcp(&self) -> &TcpStream {
        match self {
            Conn::Plain(s) => s,
            Conn::TlsServer(s) => s.get_ref(),
            Conn::TlsClient(s) => s.get_ref(),
        }
    }

    pub fn accept_tls(tcp: TcpStream, config: Arc<ServerConfig>) -> io::Result<Conn> {
        let conn = ServerConnection::new(config).map_err(io::Error::other)?;
        Ok(Conn::TlsServer(Box::new(StreamOwned::new(conn, tcp))))
    }

    pub fn connect_tls(tcp: TcpStream, host: &str, config: Arc<ClientConfig>) -> io::Result<Conn> {
        let name = ServerName::try_from(host.to_string())
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let conn = ClientConnection::new(config, name).map_err(io::Error::other)?;
        Ok(Conn::TlsClient(Box::new(StreamOwned::new(conn, tcp))))
    }

    pub fn shutdown(&mut self) {
        match self {
            Conn::Plain(_) => {}
            Conn::TlsServer(s) => {
                s.conn.send_close_notify();
                let _ = s.flush();
            }
            Conn::TlsClient(s) => {
                s.conn.send_close_notify();
                let _ = s.flush();
            }
        }
        let _ = self.tcp().shutdown(std::net::Shutdown::Both);
    }
}

impl Read for Conn {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Conn::Plain(s) => s.read(buf),
            Conn::TlsServer(s) => s.read(buf),
            Conn::TlsClient(s) => s.read(buf),
        }
    }
}

impl Write for Conn {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Conn::Plain(s) => s.write(buf),
            Conn::TlsServer(s) => s.write(buf),
            Conn::TlsClient(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Conn::Plain(s) => s.flush(),
            Conn::TlsServer(s) => s.flush(),
            Conn::TlsClient(s) => s.flush(),
        }
    }
}

/// A buffered connection that can be both read line-wise and written.
pub struct Duplex {
    inner: BufReader<Conn>,
}

impl Duplex {
    pub fn new(conn: Conn) -> Self {
        Duplex {
            inner: BufReader::new(conn),
        }
    }

    pub fn conn(&self) -> &Conn {
        self.inner.get_ref()
    }

    pub fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        let c = self.inner.get_mut();
        c.write_all(bytes)?;
        c.flush()
    }

    pub fn shutdown(&mut self) {
        self.inner.get_mut().shutdown();
    }
}

impl Read for Duplex {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.inner.read(buf)
    }
}

impl BufRead for Duplex {
    fn fill_buf(&mut self) -> io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.inner.consume(amt)
    }
}

impl Write for Duplex {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.inner.get_mut().write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.get_mut().flush()
    }
}

fn provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

fn open(path: &Path) -> io::Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn load_certs(path: &Path) -> io::Result<Vec<CertificateDer<'static>>> {
    let certs = rustls_pemfile::certs(&mut open(path)?).collect::<Result<Vec<_>, _>>()?;
    if certs.is_empty() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: no certificates found", path.display()),
        ));
    }
    Ok(certs)
}

pub fn server_config(cert: &Path, key: &Path) -> io::Result<Arc<ServerConfig>> {
    let certs = load_certs(cert)?;
    let key: PrivateKeyDer<'static> = rustls_pemfile::private_key(&mut open(key)?)?.ok_or_else(|| {
        io::Error::new(io::ErrorKind::InvalidData, format!("{}: no private key found", key.display()))
    })?;
    let config = ServerConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()
        .map_err(io::Error::other)?
        .with_no_client_auth()
        .with_single_cert(certs, key)
        .map_err(io::Error::other)?;
    Ok(Arc::new(config))
}

/// Client configuration trusting the bundled web PKI roots plus `extra_ca`.
pub fn client_config(extra_ca: Option<&Path>) -> io::Result<Arc<ClientConfig>> {
    let mut roots = RootCertStore::empty();
    roots.extend(webpki_roots::TLS_SERVER_ROOTS.iter().cloned());
    if let Some(path) = extra_ca {
        for cert in load_certs(path)? {
            roots.add(cert).map_err(io::Error::other)?;
        }
    }
    let config = ClientConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()
        .map_err(io::Error::other)?
        .with_root_certificates(roots)
        .with_no_client_auth();
    Ok(Arc::new(config))
}
