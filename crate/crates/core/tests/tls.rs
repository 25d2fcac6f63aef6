mod support;

use std::net::TcpStream;
use std::time::Duration;

use chamail_core::mockimap::ImapClient;
use chamail_core::proxy::{client_config, Conn, Proxy, ProxyConfig, TlsFiles};
use support::*;

struct Tls {
    _mock: chamail_core::mockimap::MockServer,
    dir: tempfile::TempDir,
    addr: std::net::SocketAddr,
}

fn start() -> Tls {
    let h = Harness::sample();
    let dir = tempfile::tempdir().unwrap();
    let cert = rcgen::generate_simple_self_signed(vec!["localhost".to_string()]).unwrap();
    std::fs::write(dir.path().join("cert.pem"), cert.cert.pem()).unwrap();
    std::fs::write(dir.path().join("key.pem"), cert.key_pair.serialize_pem()).unwrap();
    let store = dir.path().join("store.json");
    std::fs::copy(&h.store_path, &store).unwrap();

    let mut config = ProxyConfig::new("127.0.0.1:0".parse().unwrap(), store);
    config.tls = Some(TlsFiles {
        cert: dir.path().join("cert.pem"),
        key: dir.path().join("key.pem"),
    });
    let proxy = Proxy::bind(config, h.key.clone()).unwrap();
    let addr = proxy.local_addr();
    std::thread::spawn(move || proxy.run());
    Tls { _mock: h.mock, dir, addr }
}

fn tcp(addr: std::net::SocketAddr, timeout: Duration) -> TcpStream {
    let s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(timeout)).unwrap();
    s
}

#[test]
fn sub_user_session_over_tls() {
    let t = start();
    let cfg = client_config(Some(&t.dir.path().join("cert.pem"))).unwrap();
    let conn = Conn::connect_tls(tcp(t.addr, Duration::from_secs(5)), "localhost", cfg).unwrap();
    let mut c = ImapClient::from_stream(conn).unwrap();
    assert!(c.greeting.starts_with(b"* OK"));
    assert!(c.login(ACCOUNT, SPOUSE_PW).unwrap().is_ok());
    assert_eq!(c.run("SELECT INBOX").unwrap().exists(), Some(4));
}

#[test]
fn untrusted_certificate_is_refused() {
    let t = start();
    let cfg = client_config(None).unwrap();
    let conn = Conn::connect_tls(tcp(t.addr, Duration::from_secs(5)), "localhost", cfg).unwrap();
    assert!(ImapClient::from_stream(conn).is_err());
}

#[test]
fn plaintext_client_gets_no_greeting() {
    let t = start();
    assert!(ImapClient::from_stream(tcp(t.addr, Duration::from_millis(300))).is_err());
}
