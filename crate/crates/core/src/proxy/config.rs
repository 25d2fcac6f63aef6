use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::credstore::UpstreamTarget;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:1143";

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlsFiles {
    pub cert: PathBuf,
    pub key: PathBuf,
}

/// Per-account replacement of stored upstream settings. TLS can be turned
/// on here but never off.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamOverride {
    pub host: Option<String>,
    pub port: Option<u16>,
    pub use_tls: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    pub store: PathBuf,
    #[serde(default)]
    pub tls: Option<TlsFiles>,
    /// Extra PEM root certificates trusted for upstream TLS.
    #[serde(default)]
    pub upstream_ca: Option<PathBuf>,
    #[serde(default)]
    pub upstream_overrides: BTreeMap<String, UpstreamOverride>,
}

fn default_listen() -> SocketAddr {
    DEFAULT_LISTEN.parse().expect("valid default")
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
}

/// Where and how to reach an account's upstream server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
    pub use_tls: bool,
}

impl ProxyConfig {
    pub fn new(listen: SocketAddr, store: PathBuf) -> Self {
        ProxyConfig {
            listen,
            store,
            tls: None,
            upstream_ca: None,
            upstream_overrides: BTreeMap::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: ProxyConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.upstream_overrides = std::mem::take(&mut cfg.upstream_overrides)
            .into_iter()
            .map(|(k, v)| (k.to_lowercase(), v))
            .collect();
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.store);
        if let Some(t) = cfg.tls.as_mut() {
            fix(&mut t.cert);
            fix(&mut t.key);
        }
        if let Some(ca) = cfg.upstream_ca.as_mut() {
            fix(ca);
        }
        Ok(cfg)
    }

    pub fn endpoint(&self, email: &str, target: &UpstreamTarget) -> Endpoint {
        let o = self.upstream_overrides.get(&email.to_lowercase());
        Endpoint {
            host: o.and_then(|o| o.host.clone()).unwrap_or_else(|| target.host.clone()),
            port: o.and_then(|o| o.port).unwrap_or(target.port),
            use_tls: target.use_tls || o.and_then(|o| o.use_tls).unwrap_or(false),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::SealedSecret;

    #[test]
    fn parses_full_config() {
        let cfg = ProxyConfig::from_toml(
            r#"
            listen = "0.0.0.0:1993"
            store = "/var/lib/chamail/store.json"
            upstream_ca = "ca.pem"
            [tls]
            cert = "cert.pem"
            key = "key.pem"
            [upstream_overrides."Person@Gmail.com"]
            host = "127.0.0.1"
            port = 1430
            use_tls = false
            "#,
        )
        .unwrap();
        assert_eq!(cfg.listen.port(), 1993);
        assert!(cfg.tls.is_some());
        let target = UpstreamTarget {
            host: "imap.gmail.com".into(),
            port: 993,
            use_tls: true,
            upstream_login: "person@gmail.com".into(),
            sealed_password: SealedSecret(vec![]),
        };
        let ep = cfg.endpoint("person@gmail.com", &target);
        assert_eq!(ep, Endpoint { host: "127.0.0.1".into(), port: 1430, use_tls: true });
        let ep = cfg.endpoint("other@gmail.com", &target);
        assert_eq!(ep.host, "imap.gmail.com");
    }

    #[test]
    fn defaults_and_errors() {
        let cfg = ProxyConfig::from_toml("store = \"s.json\"").unwrap();
        assert_eq!(cfg.listen.to_string(), DEFAULT_LISTEN);
        assert!(ProxyConfig::from_toml("listen = \"x\"\nstore = \"s\"").is_err());
        assert!(ProxyConfig::from_toml("store = \"s\"\nbogus = 1").is_err());
        assert!(ProxyConfig::from_toml("").is_err());
    }

    #[test]
    fn relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("chamail.toml");
        std::fs::write(&p, "store = \"store.json\"\n").unwrap();
        let cfg = ProxyConfig::load(&p).unwrap();
        assert_eq!(cfg.store, dir.path().join("store.json"));
    }
}
