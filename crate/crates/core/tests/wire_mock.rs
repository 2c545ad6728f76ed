//! Wire client against a local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use o1loom_core::backends::{stack, ChatCompletionsBackend, Decoding, ModelRequest, ResponseCache, RetryPolicy, WireConfig};
use o1loom_core::data::{load_dataset, LoadMode};
use o1loom_core::engine::run_dataset;
use o1loom_core::scripted::FixtureSuite;
use o1loom_core::types::Experience;
use o1loom_core::{Backend, BackendError, BackendRef, CallStats, EngineContext, RunConfig};
use serde_json::Value;

#[derive(Debug, Clone)]
struct Seen {
    auth: Option<String>,
    path: String,
    body: Value,
}

struct Mock {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_owned();
    let (mut len, mut auth) = (0usize, None);
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
            "authorization" => auth = Some(value.trim().to_owned()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Seen { auth, path, body: serde_json::from_slice(&body).ok()? })
}

/// Serves `(status, text)` replies in order, repeating the last one.
fn serve(replies: Vec<(u16, &'static str)>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { continue };
            let Some(req) = read_request(&mut stream) else { continue };
            log.lock().unwrap().push(req);
            let (status, text) = replies[i.min(replies.len() - 1)];
            let body = if status == 200 {
                serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}],
                                   "usage": {"prompt_tokens": 11, "completion_tokens": 3}})
                .to_string()
            } else {
                format!("{{\"error\": \"{text}\"}}")
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    Mock { url, seen }
}

fn client(url: &str, key: Option<&str>) -> ChatCompletionsBackend {
    ChatCompletionsBackend::new(
        "wire",
        WireConfig { base_url: url.to_owned(), api_key: key.map(str::to_owned), timeout: Duration::from_secs(10) },
    )
}

fn fast() -> RetryPolicy {
    RetryPolicy { base: Duration::from_millis(1), ..RetryPolicy::default() }
}

#[test]
fn retries_server_errors_then_succeeds() {
    let mock = serve(vec![(500, "busy"), (500, "busy"), (200, "the red mug")]);
    let stats = Arc::new(CallStats::default());
    let b = stack(Arc::new(client(&mock.url, Some("k"))), None, fast(), Arc::clone(&stats));
    let dir = tempfile::tempdir().unwrap();
    let suite = FixtureSuite::write(dir.path()).unwrap();
    let data = load_dataset(&suite.vqa, LoadMode::Strict).unwrap();
    let req = ModelRequest::user(
        &BackendRef::new("wire", "m-1"),
        "describe",
        data.records[0].visual.as_ref(),
        Decoding { temperature: 0.0, seed: 7, max_tokens: 64 },
    );
    let resp = b.complete(&req).unwrap();
    assert_eq!(resp.text, "the red mug");
    assert_eq!(resp.attempts, 3);
    assert_eq!(resp.usage.prompt_tokens, 11);
    let s = stats.snapshot();
    assert_eq!((s.remote_calls, s.retries, s.failures), (3, 2, 0));

    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let last = &seen[2];
    assert_eq!(last.path, "/v1/chat/completions");
    assert_eq!(last.auth.as_deref(), Some("Bearer k"));
    assert_eq!(last.body["model"], "m-1");
    assert_eq!(last.body["seed"], 7);
    assert_eq!(last.body["max_tokens"], 64);
    let parts = last.body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(parts[0]["text"], "describe");
    assert!(parts[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
}

#[test]
fn auth_failures_are_not_retried() {
    let mock = serve(vec![(401, "bad key")]);
    let stats = Arc::new(CallStats::default());
    let b = stack(Arc::new(client(&mock.url, Some("k"))), None, fast(), Arc::clone(&stats));
    let req = ModelRequest::user(&BackendRef::new("wire", "m"), "hi", None, Decoding::default());
    assert!(matches!(b.complete(&req), Err(BackendError::Auth(_))));
    assert_eq!(mock.seen.lock().unwrap().len(), 1);
    assert_eq!(stats.snapshot().failures, 1);
}

#[test]
fn missing_key_fails_before_sending() {
    let mock = serve(vec![(200, "x")]);
    let req = ModelRequest::user(&BackendRef::new("wire", "m"), "hi", None, Decoding::default());
    assert!(matches!(client(&mock.url, None).complete(&req), Err(BackendError::Auth(_))));
    assert!(mock.seen.lock().unwrap().is_empty());
}

#[test]
fn exhausted_retries_report_attempts() {
    let mock = serve(vec![(503, "down")]);
    let stats = Arc::new(CallStats::default());
    let policy = RetryPolicy { max_attempts: 3, ..fast() };
    let b = stack(Arc::new(client(&mock.url, Some("k"))), None, policy, stats);
    let req = ModelRequest::user(&BackendRef::new("wire", "m"), "hi", None, Decoding::default());
    match b.complete(&req) {
        Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(mock.seen.lock().unwrap().len(), 3);
}

#[test]
fn cached_dataset_run_hits_the_server_once_per_request() {
    let mock = serve(vec![(200, "<answer> a clear question </answer>")]);
    let dir = tempfile::tempdir().unwrap();
    let suite = FixtureSuite::write(&dir.path().join("fx")).unwrap();
    let data = load_dataset(&suite.vqa, LoadMode::Strict).unwrap();
    let cache_dir = dir.path().join("cache");
    let config = RunConfig { task_model: BackendRef::new("wire", "m"), ..RunConfig::default() };
    let experience = Experience::empirical(42, 3);

    let mut runs = Vec::new();
    for _ in 0..2 {
        let stats = Arc::new(CallStats::default());
        let b = stack(
            Arc::new(client(&mock.url, Some("k"))),
            Some(ResponseCache::new(&cache_dir)),
            fast(),
            Arc::clone(&stats),
        );
        let ctx = EngineContext::new(Arc::clone(&b), b);
        let out = run_dataset(&ctx, &data.records, &config, Some(&experience), 3).unwrap();
        assert!(out.iter().all(|o| o.as_ref().is_ok_and(|r| r.model_calls == 2)));
        runs.push((out.into_iter().map(|o| o.unwrap().answer).collect::<Vec<_>>(), stats.snapshot()));
    }
    assert_eq!(mock.seen.lock().unwrap().len(), 2 * data.records.len());
    assert_eq!(runs[0].0, runs[1].0);
    assert_eq!((runs[0].1.remote_calls, runs[0].1.cache_misses), (8, 8));
    assert_eq!((runs[1].1.remote_calls, runs[1].1.cache_hits, runs[1].1.cache_misses), (0, 8, 0));
}
