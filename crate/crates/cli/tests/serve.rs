//! Drives `virreq serve` over real HTTP, then replays the exported log with
//! `virreq run --script`.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use virreq_core::{NodeId, RecognitionTree};

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_virreq"));
    c.env_remove("VIRREQ_DATA_DIR");
    c
}

/// One HTTP/1.1 exchange; returns status, ETag and JSON body.
fn http(port: u16, method: &str, path: &str, body: Option<&Value>) -> (u16, Option<String>, Value) {
    let mut s = TcpStream::connect(("127.0.0.1", port)).expect("server accepts");
    let payload = body.map(|b| b.to_string()).unwrap_or_default();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
        payload.len()
    )
    .unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).unwrap();
    let text = String::from_utf8_lossy(&raw);
    let (head, body) = text.split_once("\r\n\r\n").expect("http response");
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let etag = head
        .lines()
        .find_map(|l| l.to_ascii_lowercase().starts_with("etag:").then(|| l[5..].trim().trim_matches('"').to_string()));
    (status, etag, serde_json::from_str(body).unwrap_or(Value::Null))
}

fn start(data: &str) -> (Server, u16) {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let child = bin()
        .args(["serve", "--port", &port.to_string(), "--host", "127.0.0.1", "--data", data])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let server = Server(child);
    let deadline = Instant::now() + Duration::from_secs(20);
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }
    (server, port)
}

fn tree_of(v: &Value) -> RecognitionTree {
    RecognitionTree::parse(v.to_string().as_bytes(), None).unwrap()
}

#[test]
fn annotation_session_export_replays_to_final_etag() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let spec = d.path().join("spec.json");
    std::fs::write(&spec, r#"{"width":64,"height":48,"max_depth":2,"thing_prob":1.0,"parts_required":true}"#).unwrap();
    let o = bin()
        .args(["--seed", "5", "gen", "--spec", spec.to_str().unwrap(), "--n", "1", "--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let (_server, port) = start(data.to_str().unwrap());
    assert_eq!(http(port, "GET", "/health", None).0, 200);
    let (s, _, v) = http(port, "POST", "/sessions", Some(&json!({ "image_id": "img00000", "backend": "oracle" })));
    assert_eq!(s, 201, "{v}");
    let sid = v["session_id"].as_str().unwrap().to_string();
    let req = format!("/sessions/{sid}/requests");

    let (s, _, v) = http(port, "POST", &req, Some(&json!({ "kind": "I", "node": 0 })));
    assert_eq!(s, 200, "{v}");
    let (_, _, t) = http(port, "GET", &format!("/sessions/{sid}/tree"), None);
    let t = tree_of(&t);

    // Click the first pixel of each top-level region until one yields an instance.
    let mut instance = None;
    for n in t.children(NodeId::ROOT) {
        let (a, b) = n.mask.iter_set().next().unwrap();
        let (s, _, v) = http(port, "POST", &req, Some(&json!({ "kind": "II", "node": n.id, "probe": [a, b] })));
        assert_eq!(s, 200, "{v}");
        if let Some(first) = v["applied"].as_array().and_then(|a| a.first()) {
            instance = Some(first["id"].as_u64().unwrap());
            break;
        }
    }
    let instance = instance.expect("some region has an instance");
    let (s, _, v) = http(port, "POST", &req, Some(&json!({ "kind": "I", "node": instance })));
    assert_eq!(s, 200, "{v}");
    let (_, before_undo, _) = http(port, "GET", &format!("/sessions/{sid}/tree"), None);
    let (s, _, v) = http(port, "POST", &format!("/sessions/{sid}/undo"), None);
    assert_eq!(s, 200, "{v}");
    let (_, etag, _) = http(port, "GET", &format!("/sessions/{sid}/tree"), None);
    assert_ne!(etag, before_undo);

    let (s, _, v) = http(port, "POST", &format!("/sessions/{sid}/export"), None);
    assert_eq!(s, 200, "{v}");
    assert_eq!(v["etag"].as_str(), etag.as_deref());
    let log = v["log_path"].as_str().unwrap().to_string();

    let kb = std::fs::read_dir(data.join("kb")).unwrap().next().unwrap().unwrap().path();
    let out = d.path().join("replayed.tree.json");
    let o = bin()
        .args(["--json", "run", "--script", &log, "--kb", kb.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["hash"].as_str(), etag.as_deref());
}
