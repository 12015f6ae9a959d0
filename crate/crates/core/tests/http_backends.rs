//! Wire-level checks of the HTTP adapters against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;
use valuesrag::backends::{
    embed_batch, rerank, BackendConfig, BackendError, GenerationRequest, Generator, HttpEmbedder,
    HttpGenerator, HttpReranker, RerankRequest,
};

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<String>,
    body: Value,
}

/// Serve `script` (status, body) one response per connection; returns the
/// base URL and the captured requests.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { headers, body: serde_json::from_slice(&buf).unwrap_or(Value::Null) });
            let reason = if status == 200 { "OK" } else { "ERR" };
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (url, seen)
}

fn config(url: &str, retries: u32) -> BackendConfig {
    BackendConfig { model: "test-model".into(), retries, backoff_ms: vec![5], ..BackendConfig::new(url) }
}

const COMPLETION: &str = r#"{"choices":[{"message":{"role":"assistant","content":"{\"answer\": 4}"}}]}"#;

#[test]
fn generation_retries_after_429() {
    let (url, seen) = serve(vec![(429, "{}".into()), (200, COMPLETION.into())]);
    let g = HttpGenerator::new(config(&url, 2)).unwrap();
    let out = g.complete(&GenerationRequest::new("system text", "user text", "t")).unwrap();
    assert_eq!(out, r#"{"answer": 4}"#);
    assert_eq!(g.client().requests_sent(), 2);

    let seen = seen.lock().unwrap();
    let body = &seen[1].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], "system text");
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["messages"][1]["content"], "user text");
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["max_tokens"], 512);
}

#[test]
fn retries_exhausted_reports_status() {
    let (url, _) = serve(vec![(503, "down".into()), (503, "down".into())]);
    let g = HttpGenerator::new(config(&url, 1)).unwrap();
    let err = g.complete(&GenerationRequest::new("s", "u", "t")).unwrap_err();
    assert_eq!(err, BackendError::Status { status: 503, body: "down".into() });
    assert_eq!(g.client().requests_sent(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, _) = serve(vec![(400, "bad".into())]);
    let g = HttpGenerator::new(config(&url, 3)).unwrap();
    assert!(matches!(g.complete(&GenerationRequest::new("s", "u", "t")), Err(BackendError::Status { status: 400, .. })));
    assert_eq!(g.client().requests_sent(), 1);
}

#[test]
fn transport_failure_after_retries() {
    // bind then drop to get a closed port
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let g = HttpGenerator::new(config(&format!("http://127.0.0.1:{port}/x"), 1)).unwrap();
    assert!(matches!(g.complete(&GenerationRequest::new("s", "u", "t")), Err(BackendError::Transport(_))));
}

#[test]
fn bearer_token_comes_from_named_env_var_and_not_backend_id() {
    let (url, seen) = serve(vec![(200, COMPLETION.into())]);
    std::env::set_var("VALUESRAG_TEST_SECRET", "s3cret-token");
    let cfg = BackendConfig { auth_env: Some("VALUESRAG_TEST_SECRET".into()), ..config(&url, 0) };
    let g = HttpGenerator::new(cfg).unwrap();
    g.complete(&GenerationRequest::new("s", "u", "t")).unwrap();
    let seen = seen.lock().unwrap();
    assert!(seen[0].headers.iter().any(|h| h == "authorization: Bearer s3cret-token" || h == "Authorization: Bearer s3cret-token"));
    assert!(!g.backend_id().contains("s3cret"));
}

#[test]
fn missing_secret_is_a_config_error() {
    let cfg = BackendConfig { auth_env: Some("VALUESRAG_TEST_UNSET_VAR".into()), ..config("http://127.0.0.1:9/x", 0) };
    let g = HttpGenerator::new(cfg).unwrap();
    assert!(matches!(g.complete(&GenerationRequest::new("s", "u", "t")), Err(BackendError::Config(_))));
}

#[test]
fn embedding_wire_format() {
    let (url, seen) = serve(vec![(200, r#"{"data":[{"embedding":[1.0,0.0]},{"embedding":[0.0,2.5]}]}"#.into())]);
    let e = HttpEmbedder::new(config(&url, 0)).unwrap();
    let v = embed_batch(&["a".into(), "b".into()], &e).unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 2.5]]);
    assert_eq!(seen.lock().unwrap()[0].body["input"], serde_json::json!(["a", "b"]));
}

#[test]
fn embedding_dimension_mismatch_detected() {
    let (url, _) = serve(vec![(200, r#"{"embeddings":[[1.0,0.0],[1.0]]}"#.into())]);
    let e = HttpEmbedder::new(config(&url, 0)).unwrap();
    assert!(matches!(embed_batch(&["a".into(), "b".into()], &e), Err(BackendError::DimensionMismatch { .. })));
}

#[test]
fn rerank_wire_format() {
    let (url, seen) = serve(vec![(
        200,
        r#"{"results":[{"index":1,"relevance_score":0.9},{"index":0,"relevance_score":0.2}]}"#.into(),
    )]);
    let r = HttpReranker::new(config(&url, 0)).unwrap();
    let req = RerankRequest {
        query_text: "query".into(),
        candidates: vec![("x".into(), "doc x".into()), ("y".into(), "doc y".into())],
    };
    let scores = rerank(&req, &r).unwrap();
    assert_eq!(scores, vec![("x".into(), 0.2), ("y".into(), 0.9)]);
    let body = &seen.lock().unwrap()[0].body;
    assert_eq!(body["query"], "query");
    assert_eq!(body["documents"], serde_json::json!(["doc x", "doc y"]));
}

#[test]
fn rerank_missing_score_detected() {
    let (url, _) = serve(vec![(200, r#"{"results":[{"index":0,"relevance_score":0.5}]}"#.into())]);
    let r = HttpReranker::new(config(&url, 0)).unwrap();
    let req = RerankRequest {
        query_text: "q".into(),
        candidates: vec![("x".into(), "a".into()), ("y".into(), "b".into())],
    };
    assert_eq!(rerank(&req, &r), Err(BackendError::MissingScore("y".into())));
}
