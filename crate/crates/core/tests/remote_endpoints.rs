//! Remote embedder and chat policy against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use exprag_core::embed::{EmbedError, Embedder, RemoteEmbedder, RemoteEmbedderConfig};
use exprag_core::policy::{decide_action, PolicyError, RemoteChatConfig, RemoteChatPolicy};
use exprag_core::traj::Turn;
use serde_json::{json, Value};

struct Request {
    path: String,
    auth: Option<String>,
    body: Value,
}

type Handler = dyn Fn(&Request) -> (u16, String) + Send + Sync;

struct MockServer {
    url: String,
    requests: Arc<Mutex<Vec<Request>>>,
}

fn read_request(reader: &mut BufReader<TcpStream>) -> Option<Request> {
    let mut line = String::new();
    if reader.read_line(&mut line).ok()? == 0 {
        return None;
    }
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut len = 0;
    let mut auth = None;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':')?;
        match name.to_ascii_lowercase().as_str() {
            "content-length" => len = value.trim().parse().ok()?,
            "authorization" => auth = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request {
        path,
        auth,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    })
}

fn serve(handler: Arc<Handler>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests: Arc<Mutex<Vec<Request>>> = Arc::default();
    let log = Arc::clone(&requests);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let handler = Arc::clone(&handler);
            let log = Arc::clone(&log);
            thread::spawn(move || {
                let mut writer = stream.try_clone().unwrap();
                let mut reader = BufReader::new(stream);
                while let Some(req) = read_request(&mut reader) {
                    let (status, body) = handler(&req);
                    log.lock().unwrap().push(req);
                    let head = format!(
                        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
                        body.len()
                    );
                    if writer
                        .write_all(head.as_bytes())
                        .and_then(|_| writer.write_all(body.as_bytes()))
                        .is_err()
                    {
                        break;
                    }
                }
            });
        }
    });
    MockServer { url, requests }
}

fn chat_reply(content: Value) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn chat(url: &str) -> RemoteChatPolicy {
    let mut cfg = RemoteChatConfig::new(url, "m");
    cfg.backoff = Duration::from_millis(5);
    cfg.token = Some("sekret".into());
    RemoteChatPolicy::new(cfg).unwrap()
}

fn ctx() -> Vec<Turn> {
    vec![Turn::system("rules"), Turn::user("You arrive at shelf 1.")]
}

#[test]
fn chat_request_shape_and_first_line() {
    let server = serve(Arc::new(|_: &Request| {
        (200, chat_reply(json!("  look \n extra")))
    }));
    let policy = chat(&server.url);
    assert_eq!(decide_action(&policy, &ctx()).unwrap(), "look");

    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].path, "/v1/chat/completions");
    assert_eq!(reqs[0].auth.as_deref(), Some("Bearer sekret"));
    assert_eq!(
        reqs[0].body,
        json!({
            "model": "m",
            "temperature": 0,
            "messages": [
                {"role": "system", "content": "rules"},
                {"role": "user", "content": "You arrive at shelf 1."}
            ]
        })
    );
}

#[test]
fn empty_or_null_completion_is_the_sentinel() {
    for content in [json!(""), json!(null), json!("\n\n")] {
        let body = chat_reply(content);
        let server = serve(Arc::new(move |_: &Request| (200, body.clone())));
        assert_eq!(decide_action(&chat(&server.url), &ctx()).unwrap(), "look");
    }
}

#[test]
fn transient_failures_are_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = Arc::clone(&calls);
    let server = serve(Arc::new(move |_: &Request| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            (503, "{}".into())
        } else {
            (200, chat_reply(json!("go to shelf 1")))
        }
    }));
    assert_eq!(
        decide_action(&chat(&server.url), &ctx()).unwrap(),
        "go to shelf 1"
    );
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn retries_are_bounded() {
    let server = serve(Arc::new(|_: &Request| (500, "{}".into())));
    let err = decide_action(&chat(&server.url), &ctx()).unwrap_err();
    assert!(
        matches!(err, PolicyError::Exhausted { attempts: 3, .. }),
        "{err}"
    );
    assert_eq!(server.requests.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(Arc::new(|_: &Request| (400, "{\"error\": \"bad\"}".into())));
    let err = decide_action(&chat(&server.url), &ctx()).unwrap_err();
    assert!(matches!(err, PolicyError::Http(_)), "{err}");
    assert_eq!(server.requests.lock().unwrap().len(), 1);
}

#[test]
fn long_actions_are_truncated() {
    let server = serve(Arc::new(|_: &Request| {
        (200, chat_reply(json!("go to the very far away shelf")))
    }));
    let mut cfg = RemoteChatConfig::new(&server.url, "m");
    cfg.max_action_chars = 5;
    let policy = RemoteChatPolicy::new(cfg).unwrap();
    assert_eq!(decide_action(&policy, &ctx()).unwrap(), "go to");
}

fn embed_handler(req: &Request) -> (u16, String) {
    let inputs = req.body["input"].as_array().cloned().unwrap_or_default();
    // Reply out of order to check reordering by index.
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .rev()
        .map(|(i, t)| {
            let n = t.as_str().unwrap().len() as f64;
            json!({"index": i, "embedding": [n, 1.0, 0.0]})
        })
        .collect();
    thread::sleep(Duration::from_millis(20));
    (200, json!({"data": data}).to_string())
}

#[test]
fn embeddings_are_ordered_and_normalized() {
    let server = serve(Arc::new(embed_handler));
    let e = RemoteEmbedder::new(RemoteEmbedderConfig::new(&server.url, "emb")).unwrap();
    let v = e.embed_batch(&["a", "abc"]).unwrap();
    assert_eq!(v.len(), 2);
    assert!((v[0].norm() - 1.0).abs() < 1e-6);
    let raw = |n: f64| n / (n * n + 1.0).sqrt();
    assert!((v[0].values()[0] as f64 - raw(1.0)).abs() < 1e-6);
    assert!((v[1].values()[0] as f64 - raw(3.0)).abs() < 1e-6);
    assert_eq!(e.id(), "remote:emb");
    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs[0].path, "/v1/embeddings");
    assert_eq!(reqs[0].body, json!({"model": "emb", "input": ["a", "abc"]}));
}

#[test]
fn wrong_dimension_is_rejected() {
    let server = serve(Arc::new(embed_handler));
    let mut cfg = RemoteEmbedderConfig::new(&server.url, "emb");
    cfg.expected_dim = Some(4);
    let e = RemoteEmbedder::new(cfg).unwrap();
    assert!(matches!(
        e.embed("x"),
        Err(EmbedError::DimensionMismatch {
            expected: 4,
            got: 3
        })
    ));
}

#[test]
fn in_flight_requests_are_bounded() {
    let server = serve(Arc::new(embed_handler));
    let mut cfg = RemoteEmbedderConfig::new(&server.url, "emb");
    cfg.max_in_flight = 2;
    let e = Arc::new(RemoteEmbedder::new(cfg).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let e = Arc::clone(&e);
            thread::spawn(move || e.embed(&format!("text {i}")).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert!(e.endpoint().gate().peak() <= 2);
    assert_eq!(server.requests.lock().unwrap().len(), 8);
}
