use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn domainsat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_domainsat")).args(args).current_dir(dir).output().unwrap()
}

fn synth(dir: &Path) {
    for (kind, seed) in [("id", "1"), ("harmful", "2")] {
        let out = domainsat(dir, &["synth", "--kind", kind, "--n", "300", "--d", "4", "--seed", seed]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);

    let same = domainsat(d, &["detect", "--reference", "id_features.csv", "--target", "id_features.csv", "--metrics", "wasserstein"]);
    assert_eq!(same.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&same.stdout).unwrap();
    assert_eq!(report["kind"], "shift");

    let alarm = domainsat(d, &["cdi", "--reference-preds", "id_predictions.csv", "--target-preds", "harmful_predictions.csv"]);
    assert_eq!(alarm.status.code(), Some(2));

    let bad = domainsat(d, &["detect", "--reference", "id_features.csv", "--target", "id_features.csv", "--metrics", "nope"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("mmd"));

    let missing = domainsat(d, &["detect", "--reference", "absent.csv", "--target", "id_features.csv"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(domainsat(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(domainsat(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn csv_and_out_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let out = domainsat(d, &[
        "detect", "--reference", "id_features.csv", "--target", "harmful_features.csv",
        "--metrics", "mmd,wasserstein", "--tests", "ks", "--format", "csv",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert!(rows.len() >= 3, "{text}");
    assert!(rows.iter().any(|r| r.contains("mmd")) && rows.iter().any(|r| r.contains("ks")));

    let with_file = domainsat(d, &["cdi", "--reference-preds", "id_predictions.csv", "--target-preds", "id_predictions.csv", "--out", "r.json"]);
    assert_eq!(with_file.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "cdi");

    let rejected = domainsat(d, &["histogram", "--input", "id_features.csv", "--format", "csv"]);
    assert_eq!(rejected.status.code(), Some(1));
}

struct Serving(Child);

impl Drop for Serving {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn spawn_serve(dir: &Path, port: u16) -> Serving {
    let child = Command::new(env!("CARGO_BIN_EXE_domainsat"))
        .args(["--data-dir", "state", "serve", "--port", &port.to_string()])
        .current_dir(dir)
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    Serving(child)
}

fn http(port: u16, method: &str, path: &str, body: &[u8], content_type: &str) -> Option<(u16, Vec<u8>)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\n\r\n",
        body.len()
    );
    s.write_all(head.as_bytes()).ok()?;
    s.write_all(body).ok()?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).ok()?;
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n")?;
    let status = std::str::from_utf8(&raw[9..12]).ok()?.parse().ok()?;
    Some((status, raw[split + 4..].to_vec()))
}

fn wait_healthy(port: u16) {
    let start = Instant::now();
    while start.elapsed() < Duration::from_secs(30) {
        if let Some((200, body)) = http(port, "GET", "/api/health", b"", "text/plain") {
            let v: Value = serde_json::from_slice(&body).unwrap();
            assert_eq!(v["status"], "ok");
            return;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    panic!("service never became healthy");
}

fn upload(port: u16, name: &str, bytes: &[u8]) -> u16 {
    let boundary = "XBOUNDARYX";
    let mut body = Vec::new();
    for (field, value) in [("kind", "features"), ("name", name)] {
        body.extend(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{field}\"\r\n\r\n{value}\r\n").as_bytes());
    }
    body.extend(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"{name}\"\r\n\r\n").as_bytes());
    body.extend(bytes);
    body.extend(format!("\r\n--{boundary}--\r\n").as_bytes());
    http(port, "POST", "/api/datasets", &body, &format!("multipart/form-data; boundary={boundary}")).unwrap().0
}

#[test]
fn serve_answers_and_persists_across_restart() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let port = free_port();
    {
        let _server = spawn_serve(d, port);
        wait_healthy(port);
        assert_eq!(upload(port, "id", &std::fs::read(d.join("id_features.csv")).unwrap()), 201);
    }
    let port = free_port();
    let _server = spawn_serve(d, port);
    wait_healthy(port);
    let (status, body) = http(port, "GET", "/api/datasets", b"", "text/plain").unwrap();
    assert_eq!(status, 200);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let names: Vec<&str> = v["datasets"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["id"]);
}

#[test]
fn serve_port_in_use() {
    let dir = tempfile::tempdir().unwrap();
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port().to_string();
    let out = domainsat(dir.path(), &["--data-dir", "state", "serve", "--port", &port]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot bind"));
}
