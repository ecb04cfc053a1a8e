//! The HTTP client against a scripted in-process server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use kerag_core::error::Error;
use kerag_core::llm::{Completer, HttpCompleter, InferenceParams};
use serde_json::Value;

struct Recorded {
    bodies: Vec<Value>,
    auth: Vec<Option<String>>,
}

/// Serves the scripted `(status, body)` replies in order, one per
/// connection, and records what the client sent.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Recorded>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let recorded = Arc::new(Mutex::new(Recorded {
        bodies: Vec::new(),
        auth: Vec::new(),
    }));
    let rec = Arc::clone(&recorded);
    thread::spawn(move || {
        for (status, reply) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            {
                let mut r = rec.lock().unwrap();
                r.bodies.push(serde_json::from_slice(&body).unwrap());
                r.auth.push(auth);
            }
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (url, recorded)
}

fn ok_reply(content: &str) -> (u16, String) {
    let body = serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]});
    (200, body.to_string())
}

fn params(url: &str, retries: u32) -> InferenceParams {
    InferenceParams {
        endpoint_url: url.to_string(),
        retries,
        backoff_base: Duration::from_millis(1),
        timeout: Duration::from_secs(5),
        ..InferenceParams::default()
    }
}

#[test]
fn returns_message_content_and_sends_sampling_params() {
    let (url, rec) = serve(vec![ok_reply("OK")]);
    let client = HttpCompleter::new(params(&url, 0), Some("secret".into())).unwrap();
    assert_eq!(client.complete("Say OK").unwrap(), "OK");
    let r = rec.lock().unwrap();
    let body = &r.bodies[0];
    assert_eq!(body["messages"][0]["content"], "Say OK");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["temperature"], 0.1);
    assert_eq!(body["top_p"], 0.1);
    assert_eq!(body["top_k"], 40);
    assert_eq!(body["max_tokens"], 256);
    assert_eq!(r.auth[0].as_deref(), Some("Bearer secret"));
}

#[test]
fn server_error_then_success_is_retried() {
    let (url, rec) = serve(vec![(500, "{}".into()), ok_reply("second time lucky")]);
    let client = HttpCompleter::new(params(&url, 1), None).unwrap();
    assert_eq!(client.complete("p").unwrap(), "second time lucky");
    assert_eq!(rec.lock().unwrap().bodies.len(), 2);
    assert_eq!(rec.lock().unwrap().auth[0], None);
}

#[test]
fn exhausted_retries_report_status_and_attempts() {
    let (url, _) = serve(vec![(503, "busy".into()), (503, "busy".into())]);
    let client = HttpCompleter::new(params(&url, 1), None).unwrap();
    match client.complete("p").unwrap_err() {
        Error::Endpoint { status, attempts, .. } => {
            assert_eq!(status, Some(503));
            assert_eq!(attempts, 2);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn client_errors_are_not_retried() {
    let (url, rec) = serve(vec![(401, "{\"error\":\"no\"}".into())]);
    let client = HttpCompleter::new(params(&url, 3), None).unwrap();
    let err = client.complete("p").unwrap_err();
    assert!(matches!(err, Error::Endpoint { status: Some(401), attempts: 1, .. }), "{err}");
    assert_eq!(rec.lock().unwrap().bodies.len(), 1);
}

#[test]
fn rejected_top_k_is_dropped_from_later_requests() {
    let (url, rec) = serve(vec![
        (400, "{\"error\":\"unknown field top_k\"}".into()),
        ok_reply("fine"),
        ok_reply("still fine"),
    ]);
    let client = HttpCompleter::new(params(&url, 0), None).unwrap();
    assert_eq!(client.complete("a").unwrap(), "fine");
    assert_eq!(client.complete("b").unwrap(), "still fine");
    let r = rec.lock().unwrap();
    assert!(r.bodies[0].get("top_k").is_some());
    assert!(r.bodies[1].get("top_k").is_none());
    assert!(r.bodies[2].get("top_k").is_none());
}

#[test]
fn unreachable_endpoint_makes_retries_plus_one_attempts() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let client = HttpCompleter::new(params(&format!("http://127.0.0.1:{port}"), 2), None).unwrap();
    match client.complete("p").unwrap_err() {
        Error::Endpoint { status, attempts, .. } => {
            assert_eq!(status, None);
            assert_eq!(attempts, 3);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn malformed_success_body_is_an_error() {
    let (url, _) = serve(vec![(200, "{\"choices\": []}".into())]);
    let client = HttpCompleter::new(params(&url, 2), None).unwrap();
    assert!(client.complete("p").is_err());
}
