//! The HTTP paraphrase client against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use kilab::paraphrase::{ParaphraseClient, ParaphraseConfig, PARAPHRASE_INSTRUCTION};
use kilab::Error;
use serde_json::{json, Value};

struct Recorded {
    headers: Vec<(String, String)>,
    body: Value,
}

struct Server {
    url: String,
    seen: Arc<Mutex<Vec<Recorded>>>,
    handle: Option<JoinHandle<()>>,
}

impl Server {
    /// Answers one connection per scripted `(status, body)` and then stops.
    fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        let handle = std::thread::spawn(move || {
            for (status, body) in script {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = Vec::new();
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                assert!(
                    request_line.starts_with("POST /v1/chat/completions "),
                    "{request_line}"
                );
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (k, v) = line.split_once(':').unwrap();
                    headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
                }
                let len: usize = headers
                    .iter()
                    .find(|(k, _)| k == "content-length")
                    .map(|(_, v)| v.parse().unwrap())
                    .unwrap_or(0);
                let mut raw = vec![0u8; len];
                reader.read_exact(&mut raw).unwrap();
                log.lock().unwrap().push(Recorded {
                    headers,
                    body: serde_json::from_slice(&raw).unwrap(),
                });
                let mut out = stream;
                write!(
                    out,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
                out.flush().unwrap();
            }
        });
        Self {
            url,
            seen,
            handle: Some(handle),
        }
    }

    fn finish(mut self) -> Vec<Recorded> {
        self.handle.take().unwrap().join().unwrap();
        std::mem::take(&mut *self.seen.lock().unwrap())
    }
}

fn completion(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn client(url: &str, max_retries: u32) -> ParaphraseClient {
    ParaphraseClient::http(ParaphraseConfig {
        base_url: url.into(),
        model_tag: "test-model".into(),
        max_retries,
        backoff_ms: 1,
        timeout: 5.0,
        ..ParaphraseConfig::default()
    })
    .unwrap()
}

#[test]
fn successful_completion() {
    let server = Server::start(vec![(200, completion("  Lungs show pneumonia.  "))]);
    let c = client(&server.url, 0);
    let r = c.paraphrase("Pneumonia", 17).unwrap();
    assert_eq!(r.text, "Lungs show pneumonia.");
    assert_eq!(r.model_tag, "test-model");
    assert!(!r.from_cache);
    let seen = server.finish();
    assert_eq!(seen.len(), 1);
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["seed"], 17);
    assert_eq!(body["messages"][0]["content"], PARAPHRASE_INSTRUCTION);
    assert_eq!(body["messages"][1]["content"], "Pneumonia");
    assert!(seen[0].headers.iter().all(|(k, _)| k != "authorization"));
}

#[test]
fn empty_choices_are_a_protocol_error() {
    let server = Server::start(vec![(200, json!({"choices": []}).to_string())]);
    let c = client(&server.url, 3);
    assert!(matches!(c.paraphrase("Edema", 1), Err(Error::Protocol(_))));
    // protocol errors are not retried
    assert_eq!(server.finish().len(), 1);
    assert_eq!(c.requests_issued(), 1);
}

#[test]
fn blank_content_is_an_empty_completion() {
    let server = Server::start(vec![(200, completion("   "))]);
    let c = client(&server.url, 0);
    assert!(matches!(
        c.paraphrase("Edema", 1),
        Err(Error::EmptyCompletion)
    ));
    server.finish();
}

#[test]
fn server_errors_are_retried() {
    let server = Server::start(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, completion("ok")),
    ]);
    let c = client(&server.url, 2);
    assert_eq!(c.paraphrase("Edema", 2).unwrap().text, "ok");
    assert_eq!(server.finish().len(), 3);
    assert_eq!(c.requests_issued(), 3);
}

#[test]
fn retries_are_bounded() {
    let server = Server::start(vec![(500, "{}".into()), (500, "{}".into())]);
    let c = client(&server.url, 1);
    match c.paraphrase("Edema", 2) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("unexpected {other:?}"),
    }
    server.finish();
}

#[test]
fn client_errors_fail_fast() {
    let server = Server::start(vec![(400, "{}".into())]);
    let c = client(&server.url, 3);
    assert!(matches!(c.paraphrase("Edema", 2), Err(Error::Protocol(_))));
    assert_eq!(server.finish().len(), 1);
}

#[test]
fn cache_hits_issue_no_request() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(vec![(200, completion("cached text"))]);
    let cfg = ParaphraseConfig {
        base_url: server.url.clone(),
        model_tag: "test-model".into(),
        cache_dir: Some(dir.path().to_path_buf()),
        max_retries: 0,
        ..ParaphraseConfig::default()
    };
    let c = ParaphraseClient::http(cfg.clone()).unwrap();
    let first = c.paraphrase("Atelectasis", 5).unwrap();
    assert!(!first.from_cache);
    let again = c.paraphrase("Atelectasis", 5).unwrap();
    assert!(again.from_cache);
    assert_eq!(again.text, "cached text");
    assert_eq!(c.requests_issued(), 1);
    assert_eq!(server.finish().len(), 1);

    // a fresh client reads the same file; the server is gone
    let fresh = ParaphraseClient::http(cfg).unwrap();
    assert_eq!(
        fresh.paraphrase("Atelectasis", 5).unwrap().text,
        "cached text"
    );
    assert_eq!(fresh.requests_issued(), 0);
    let key = ParaphraseClient::cache_key("test-model", "Atelectasis", 5);
    assert!(dir.path().join(key).exists());
}

#[test]
fn bearer_token_is_sent() {
    let server = Server::start(vec![(200, completion("x"))]);
    let c = ParaphraseClient::http(ParaphraseConfig {
        base_url: server.url.clone(),
        bearer_token: Some("sekret".into()),
        max_retries: 0,
        ..ParaphraseConfig::default()
    })
    .unwrap();
    c.paraphrase("Edema", 0).unwrap();
    let seen = server.finish();
    let auth = seen[0]
        .headers
        .iter()
        .find(|(k, _)| k == "authorization")
        .map(|(_, v)| v.as_str());
    // the environment variable takes precedence when set
    let expected = std::env::var(kilab::paraphrase::TOKEN_ENV_VAR)
        .ok()
        .filter(|t| !t.is_empty())
        .unwrap_or_else(|| "sekret".into());
    assert_eq!(auth, Some(format!("Bearer {expected}").as_str()));
}

#[test]
fn token_is_never_serialized() {
    let cfg = ParaphraseConfig {
        bearer_token: Some("sekret".into()),
        ..ParaphraseConfig::default()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    assert!(!text.contains("sekret"), "{text}");
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let c = client(&url, 1);
    assert!(matches!(
        c.paraphrase("Edema", 0),
        Err(Error::Transport { attempts: 2, .. })
    ));
}
