//! The IMAP proxy: listener, shared state and per-connection sessions.

mod config;
mod metadata;
mod search;
mod session;
mod tls;
mod upstream;

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime};

use rustls::{ClientConfig, ServerConfig};

pub use config::{ConfigError, Endpoint, ProxyConfig, TlsFiles, UpstreamOverride, DEFAULT_LISTEN};
pub use metadata::{MessageRecord, Snapshot};
pub use search::rewrite as rewrite_search;
pub use tls::{client_config, server_config, Conn, Duplex};

use crate::store::{self, MasterKey, StoreError, StoreFile};

/// Fixed capability list; extensions the proxy cannot filter are never offered.
pub const CAPABILITIES: &str = "IMAP4rev1 AUTH=PLAIN";
const CLIENT_TIMEOUT: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot load store {path}: {source}")]
    Store { path: PathBuf, source: StoreError },
    #[error("TLS setup failed: {0}")]
    Tls(io::Error),
    #[error("cannot listen on {addr}: {source}")]
    Listen { addr: SocketAddr, source: io::Error },
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("upstream protocol error: {0}")]
    Protocol(String),
    #[error("metadata unavailable: {0}")]
    Metadata(String),
    #[error("view out of sync: {0}")]
    Desync(String),
    #[error("upstream closed the session")]
    UpstreamBye,
}

/// The credential store as last read from disk, reloaded when the file
/// changes. A reload failure keeps the previous contents.
pub struct StoreCache {
    path: PathBuf,
    inner: Mutex<(Option<Stamp>, Arc<StoreFile>)>,
}

/// Modification time, length and inode. Saves replace the file by rename,
/// so the inode changes even when time and length do not.
type Stamp = (SystemTime, u64, u64);

fn stamp(path: &Path) -> Option<Stamp> {
    let md = std::fs::metadata(path).ok()?;
    #[cfg(unix)]
    let ino = std::os::unix::fs::MetadataExt::ino(&md);
    #[cfg(not(unix))]
    let ino = 0;
    Some((md.modified().ok()?, md.len(), ino))
}

impl StoreCache {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let st = stamp(path);
        let file = store::load(path)?;
        Ok(StoreCache {
            path: path.to_path_buf(),
            inner: Mutex::new((st, Arc::new(file))),
        })
    }

    pub fn current(&self) -> Arc<StoreFile> {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let now = stamp(&self.path);
        if now != g.0 {
            match store::load(&self.path) {
                Ok(f) => {
                    tracing::info!(path = %self.path.display(), "credential store reloaded");
                    *g = (now, Arc::new(f));
                }
                Err(e) => {
                    tracing::warn!(path = %self.path.display(), error = %e, "store reload failed; keeping previous contents");
                }
            }
        }
        Arc::clone(&g.1)
    }
}

pub(crate) struct Shared {
    pub config: ProxyConfig,
    pub key: MasterKey,
    pub store: StoreCache,
    pub server_tls: Option<Arc<ServerConfig>>,
    pub client_tls: Arc<ClientConfig>,
    pub stop: AtomicBool,
}

pub struct Proxy {
    listener: TcpListener,
    shared: Arc<Shared>,
}

impl Proxy {
    pub fn bind(config: ProxyConfig, key: MasterKey) -> Result<Proxy, ProxyError> {
        let store = StoreCache::open(&config.store).map_err(|source| ProxyError::Store {
            path: config.store.clone(),
            source,
        })?;
        let server_tls = match &config.tls {
            Some(t) => Some(server_config(&t.cert, &t.key).map_err(ProxyError::Tls)?),
            None => None,
        };
        let client_tls = client_config(config.upstream_ca.as_deref()).map_err(ProxyError::Tls)?;
        let listener = TcpListener::bind(config.listen).map_err(|source| ProxyError::Listen {
            addr: config.listen,
            source,
        })?;
        Ok(Proxy {
            listener,
            shared: Arc::new(Shared {
                config,
                key,
                store,
                server_tls,
                client_tls,
                stop: AtomicBool::new(false),
            }),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Serves connections until stopped, one thread per session.
    pub fn run(self) {
        tracing::info!(addr = %self.local_addr(), tls = self.shared.server_tls.is_some(), "listening");
        for stream in self.listener.incoming() {
            if self.shared.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    continue;
                }
            };
            let shared = Arc::clone(&self.shared);
            thread::spawn(move || serve_connection(stream, shared));
        }
    }

    /// Runs the proxy on a background thread.
    pub fn spawn(self) -> ProxyHandle {
        let addr = self.local_addr();
        let shared = Arc::clone(&self.shared);
        let thread = thread::spawn(move || self.run());
        ProxyHandle {
            addr,
            shared,
            thread: Some(thread),
        }
    }
}

fn serve_connection(stream: TcpStream, shared: Arc<Shared>) {
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "unknown".into());
    let _ = stream.set_read_timeout(Some(CLIENT_TIMEOUT));
    let _ = stream.set_nodelay(true);
    let conn = match &shared.server_tls {
        Some(cfg) => match Conn::accept_tls(stream, Arc::clone(cfg)) {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!(%peer, error = %e, "TLS setup failed");
                return;
            }
        },
        None => Conn::Plain(stream),
    };
    tracing::debug!(%peer, "connection opened");
    session::Session::new(Duplex::new(conn), shared, peer).run();
}

/// A proxy running in the background; stops when dropped.
pub struct ProxyHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl ProxyHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for ProxyHandle {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
