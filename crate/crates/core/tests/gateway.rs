mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use lmmclip::gateway::{
    read_fixture_file, record_fixtures, CacheStore, GeminiAdapter, Gateway, GatewayError, GenerationParams,
    LiveProvider, LmmProvider, LmmRequest, ProviderConfig, ProviderKind, ReplayProvider,
};
use lmmclip::http::UreqTransport;

use common::*;

fn live_config() -> ProviderConfig {
    ProviderConfig {
        kind: ProviderKind::LiveApi,
        endpoint: Some("http://fake.invalid/v1beta".into()),
        credential_ref: Some("LMMCLIP_TEST_KEY".into()),
        rate_limit_rps: 10_000.0,
        burst: 100,
        backoff_base_ms: 1,
        ..ProviderConfig::default()
    }
}

fn requests(n: usize) -> Vec<LmmRequest> {
    (0..n)
        .map(|i| LmmRequest::text_only("gemini-1.5-pro-002", format!("describe item {i}"), GenerationParams::default()))
        .collect()
}

#[test]
fn second_run_is_served_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let fake = FakeGemini::new();
    let live = LiveProvider::new(live_config(), Arc::new(GeminiAdapter), fake.clone(), "k");
    let gw = Gateway::new(Arc::new(live)).with_cache(CacheStore::open(dir.path()).unwrap());
    let reqs = requests(100);
    let first: Vec<String> = reqs.iter().map(|r| gw.query(r).unwrap().answer_text).collect();
    assert_eq!(fake.count(), 100);
    let second: Vec<_> = reqs.iter().map(|r| gw.query(r).unwrap()).collect();
    assert_eq!(fake.count(), 100);
    assert!(second.iter().all(|e| e.from_cache));
    assert_eq!(first, second.into_iter().map(|e| e.answer_text).collect::<Vec<_>>());
    assert_eq!(gw.cache().unwrap().stats().unwrap().records, 100);
}

#[test]
fn recording_round_trips_through_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fx.jsonl");
    let fake = FakeGemini::new();
    let live = LiveProvider::new(live_config(), Arc::new(GeminiAdapter), fake, "k");
    let reqs = requests(3);
    let summary = record_fixtures(&live, &reqs, &out).unwrap();
    assert_eq!(summary.recorded, 3);
    assert!(summary.failed.is_empty());
    let replay = ReplayProvider::load(&out).unwrap();
    assert_eq!(replay.len(), 3);
    for r in &reqs {
        assert_eq!(replay.query(r).unwrap().answer_text, format!("echo {}", r.prompt_text));
    }
}

#[test]
fn recording_nothing_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.jsonl");
    let live = LiveProvider::new(live_config(), Arc::new(GeminiAdapter), FakeGemini::new(), "k");
    record_fixtures(&live, &[], &out).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(read_fixture_file(&out).unwrap().is_empty());
}

#[test]
fn re_recording_keeps_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fx.jsonl");
    let reqs = requests(1);
    let first = LiveProvider::new(live_config(), Arc::new(GeminiAdapter), FakeGemini::new(), "k");
    record_fixtures(&first, &reqs, &out).unwrap();

    let mut file = read_fixture_file(&out).unwrap();
    file.push_answer(&reqs[0], "a newer answer", RECORDED_AT);
    let rec = file.get(&reqs[0].key()).unwrap();
    assert_eq!(rec.answer_text, "a newer answer");
    assert_eq!(rec.history.len(), 1);
    assert_eq!(rec.history[0].answer_text, "echo describe item 0");
    rec.verify().unwrap();
}

#[test]
fn no_network_blocks_live_calls() {
    let fake = FakeGemini::new();
    let live = LiveProvider::new(live_config(), Arc::new(GeminiAdapter), fake.clone(), "k").disable_network(true);
    let err = live.query(&requests(1)[0]).unwrap_err();
    assert!(matches!(err, GatewayError::NetworkDisabled));
    assert_eq!(fake.count(), 0);
}

/// Serves one canned HTTP response and hands back the raw request.
fn one_shot_server(status: u16, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut head = String::new();
        let mut content_length = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                content_length = v.trim().parse().unwrap();
            }
            head.push_str(&line);
            if line == "\r\n" {
                break;
            }
        }
        let mut body_buf = vec![0; content_length];
        reader.read_exact(&mut body_buf).unwrap();
        let reply = format!(
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream.write_all(reply.as_bytes()).unwrap();
        head + &String::from_utf8(body_buf).unwrap()
    });
    (format!("http://{addr}/v1beta"), handle)
}

fn http_provider(endpoint: String) -> LiveProvider {
    let cfg = ProviderConfig {
        endpoint: Some(endpoint),
        max_retries: 0,
        ..live_config()
    };
    let transport = Arc::new(UreqTransport::new(Duration::from_secs(5)));
    LiveProvider::new(cfg, Arc::new(GeminiAdapter), transport, "secret-key")
}

#[test]
fn real_http_round_trip() {
    let (endpoint, server) = one_shot_server(
        200,
        r#"{"candidates":[{"content":{"parts":[{"text":"Crib\n"}]},"finishReason":"STOP"}]}"#,
    );
    let img = mismatch_dir().join("images/crib.png");
    let req = LmmRequest::with_image("gemini-1.5-pro-002", "What is this?", &img, GenerationParams::default()).unwrap();
    let ex = http_provider(endpoint).query(&req).unwrap();
    assert_eq!(ex.answer_text, "Crib");
    let raw = server.join().unwrap();
    assert!(raw.starts_with("POST /v1beta/models/gemini-1.5-pro-002:generateContent"));
    assert!(raw.to_ascii_lowercase().contains("x-goog-api-key: secret-key"));
    assert!(raw.contains("\"inline_data\""));
    assert!(raw.contains("\"mime_type\":\"image/png\""));
}

#[test]
fn http_auth_failure_is_not_retried() {
    let (endpoint, server) = one_shot_server(403, r#"{"error":{"message":"denied"}}"#);
    let err = http_provider(endpoint).query(&requests(1)[0]).unwrap_err();
    assert!(matches!(err, GatewayError::Authentication(_)), "{err:?}");
    server.join().unwrap();
}
