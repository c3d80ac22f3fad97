use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use viewsel_core::annotate::{PromptTemplate, TemplateRole};
use viewsel_core::gateway::{
    answer_question, Backend, BackendError, BackendReply, ChatRequest, FnBackend, Gateway, GatewayError, HttpBackend,
    MockBackend, MockScript, Part, ResponseCache, RetryPolicy,
};

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        base_delay: Duration::ZERO,
        factor: 2.0,
        max_attempts: 5,
    }
}

fn script(json: &str) -> MockScript {
    serde_json::from_str(json).unwrap()
}

fn text_request(text: &str) -> ChatRequest {
    ChatRequest::new("m", "caption").user(vec![Part::text(text)])
}

#[test]
fn second_identical_request_is_cached() {
    let mock = Arc::new(MockBackend::new(script(r#"{"rules":[{"replies":["hello"]}]}"#)));
    let gw = Gateway::new(Some(mock.clone()), ResponseCache::in_memory());
    let a = gw.complete(&text_request("x")).unwrap();
    let b = gw.complete(&text_request("x")).unwrap();
    assert!(!a.served_from_cache);
    assert!(b.served_from_cache);
    assert_eq!(a.text, b.text);
    assert_eq!(mock.call_count(), 1);
}

#[test]
fn disk_cache_survives_a_new_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let mock = Arc::new(MockBackend::new(script(r#"{"rules":[{"replies":["stored"]}]}"#)));
    let gw = Gateway::new(Some(mock.clone()), ResponseCache::on_disk(dir.path()));
    gw.complete(&text_request("persist me")).unwrap();
    let key = text_request("persist me").cache_key().unwrap();
    assert!(ResponseCache::entry_path(dir.path(), &key).exists());

    let offline = Gateway::new(None, ResponseCache::on_disk(dir.path()));
    let r = offline.complete(&text_request("persist me")).unwrap();
    assert!(r.served_from_cache);
    assert_eq!(r.text, "stored");
    assert!(matches!(offline.complete(&text_request("other")), Err(GatewayError::Config(_))));
}

#[test]
fn fail_twice_then_succeed() {
    let mock = Arc::new(MockBackend::new(script(
        r#"{"rules":[{"replies":[{"transient":"busy"},{"transient":"busy"},"ok"]}]}"#,
    )));
    let gw = Gateway::new(Some(mock.clone()), ResponseCache::in_memory()).with_retry(fast_retry());
    assert_eq!(gw.complete(&text_request("r")).unwrap().text, "ok");
    assert_eq!(mock.call_count(), 3);
    assert_eq!(gw.stats().backend_calls, 3);
}

#[test]
fn retries_are_bounded() {
    let mock = Arc::new(MockBackend::new(script(r#"{"rules":[{"replies":[{"transient":"down"}]}]}"#)));
    let gw = Gateway::new(Some(mock.clone()), ResponseCache::in_memory()).with_retry(fast_retry());
    match gw.complete(&text_request("r")) {
        Err(GatewayError::Exhausted { attempts, .. }) => assert_eq!(attempts, 5),
        other => panic!("{other:?}"),
    }
    assert_eq!(mock.call_count(), 5);
}

#[test]
fn backoff_schedule() {
    let p = RetryPolicy::default();
    let delays: Vec<u64> = (1..5).map(|a| p.delay(a).as_secs()).collect();
    assert_eq!(delays, vec![1, 2, 4, 8]);
}

#[test]
fn fatal_errors_are_not_retried() {
    let mock = Arc::new(MockBackend::new(script(r#"{"rules":[{"replies":[{"fatal":"bad request"}]}]}"#)));
    let gw = Gateway::new(Some(mock.clone()), ResponseCache::in_memory()).with_retry(fast_retry());
    assert!(matches!(gw.complete(&text_request("r")), Err(GatewayError::Fatal(_))));
    assert_eq!(mock.call_count(), 1);
}

#[test]
fn unmatched_request_is_unscripted() {
    let mock = Arc::new(MockBackend::new(script(r#"{"rules":[{"when":{"tag":"answer"},"replies":["x"]}]}"#)));
    let gw = Gateway::new(Some(mock), ResponseCache::in_memory());
    assert!(matches!(gw.complete(&text_request("r")), Err(GatewayError::UnscriptedRequest(_))));
}

fn write_image(dir: &std::path::Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn cache_key_follows_image_bytes_not_paths() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_image(dir.path(), "a.ppm", b"pixels-1");
    let b = write_image(dir.path(), "b.ppm", b"pixels-2");
    let a_copy = write_image(dir.path(), "c.ppm", b"pixels-1");
    let req = |p: &PathBuf| ChatRequest::new("m", "match").user(vec![Part::image_path(p), Part::text("t")]);
    assert_ne!(req(&a).cache_key().unwrap(), req(&b).cache_key().unwrap());
    assert_eq!(req(&a).cache_key().unwrap(), req(&a_copy).cache_key().unwrap());
    let missing = dir.path().join("nope.ppm");
    assert!(matches!(req(&missing).cache_key(), Err(GatewayError::ImageUnreadable { .. })));
}

#[test]
fn canonical_json_has_sorted_keys_and_no_whitespace() {
    let c = text_request("a  b").canonical_json().unwrap();
    assert!(c.starts_with(r#"{"max_tokens":256,"messages":[{"parts":[{"text":"a  b","type":"text"}],"role":"user"}]"#));
    assert!(!c.contains(": "));
}

#[test]
fn answering_sends_all_views_then_question() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<PathBuf> =
        (0..9).map(|i| write_image(dir.path(), &format!("{i}.ppm"), format!("img{i}").as_bytes())).collect();
    let mock = Arc::new(MockBackend::new(script(
        r#"{"rules":[{"when":{"tag":"answer","contains":["What is next to the lamp?"]},"replies":["desk"]}]}"#,
    )));
    let gw = Gateway::new(Some(mock.clone()), ResponseCache::in_memory());
    let t = PromptTemplate::default_for(TemplateRole::Answer);
    assert_eq!(answer_question(&gw, "m", &images, "What is next to the lamp?", &t).unwrap(), "desk");
    let sent = &mock.requests()[0];
    assert_eq!(sent.image_count(), 9);
    let parts = &sent.messages.last().unwrap().parts;
    assert!(matches!(parts.last().unwrap(), Part::Text { .. }));
    assert_eq!(sent.image_paths(), images.iter().map(|p| p.as_path()).collect::<Vec<_>>());

    let mut reversed = images.clone();
    reversed.reverse();
    let key = |imgs: &[PathBuf]| {
        let mut parts: Vec<Part> = imgs.iter().map(Part::image_path).collect();
        parts.push(Part::text("q"));
        ChatRequest::new("m", "answer").user(parts).cache_key().unwrap()
    };
    assert_ne!(key(&images), key(&reversed));
}

#[test]
fn image_limit_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<PathBuf> = (0..4).map(|i| write_image(dir.path(), &format!("{i}.ppm"), b"x")).collect();
    let backend = Arc::new(FnBackend::new(|_| Ok(BackendReply::stop("x"))).with_image_limit(3));
    let gw = Gateway::new(Some(backend.clone()), ResponseCache::in_memory());
    let t = PromptTemplate::default_for(TemplateRole::Answer);
    match answer_question(&gw, "m", &images, "q", &t) {
        Err(GatewayError::TooManyImages { count: 4, limit: 3 }) => {}
        other => panic!("{other:?}"),
    }
    assert_eq!(backend.call_count(), 0);
}

#[test]
fn concurrent_identical_requests_send_once() {
    let backend = Arc::new(FnBackend::new(|_| {
        std::thread::sleep(Duration::from_millis(20));
        Ok(BackendReply::stop("same"))
    }));
    let gw = Gateway::new(Some(backend.clone()), ResponseCache::in_memory());
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| assert_eq!(gw.complete(&text_request("shared")).unwrap().text, "same"));
        }
    });
    assert_eq!(backend.call_count(), 1);
}

#[test]
fn rate_limit_of_zero_means_unlimited() {
    let backend = Arc::new(FnBackend::new(|r: &ChatRequest| Ok(BackendReply::stop(r.text()))));
    let gw = Gateway::new(Some(backend), ResponseCache::in_memory()).with_rate_limit(Some(0));
    for i in 0..5 {
        gw.complete(&text_request(&i.to_string())).unwrap();
    }
}

fn serve_once(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
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
        let mut body_in = vec![0u8; content_length];
        reader.read_exact(&mut body_in).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        head + &String::from_utf8(body_in).unwrap()
    });
    (url, handle)
}

#[test]
fn http_backend_speaks_chat_completions() {
    let (url, server) = serve_once(
        "200 OK",
        r#"{"choices":[{"message":{"role":"assistant","content":"a chair"},"finish_reason":"stop"}]}"#,
    );
    std::env::set_var("VIEWSEL_TEST_TOKEN_A", "secret-token");
    let backend = HttpBackend::new(url, "VIEWSEL_TEST_TOKEN_A", None, Duration::from_secs(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let img = write_image(dir.path(), "v.png", b"\x89PNG");
    let req = ChatRequest::new("model-x", "answer").user(vec![Part::image_path(&img), Part::text("what?")]);
    let reply = backend.send(&req).unwrap();
    assert_eq!(reply.text, "a chair");
    let seen = server.join().unwrap();
    assert!(seen.starts_with("POST /chat/completions"));
    assert!(seen.to_ascii_lowercase().contains("authorization: bearer secret-token"));
    assert!(seen.contains("data:image/png;base64,iVBORw=="));
    assert!(seen.contains(r#""model":"model-x""#));
}

#[test]
fn http_server_errors_are_transient() {
    let (url, server) = serve_once("503 Service Unavailable", "{}");
    let backend = HttpBackend::new(url, "VIEWSEL_TEST_TOKEN_UNSET", None, Duration::from_secs(5)).unwrap();
    assert!(matches!(backend.send(&text_request("x")), Err(BackendError::Transient(_))));
    server.join().unwrap();
    let (url, server) = serve_once("400 Bad Request", "{}");
    let backend = HttpBackend::new(url, "VIEWSEL_TEST_TOKEN_UNSET", None, Duration::from_secs(5)).unwrap();
    assert!(matches!(backend.send(&text_request("x")), Err(BackendError::Fatal(_))));
    server.join().unwrap();
}
