//! Chat client against a local HTTP server speaking the completions protocol.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use mentra_core::gateway::{completion_body, ChatClient, ChatMessage, ChatRequest, ClientPolicy, GatewayError, HttpTransport};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: String,
}

struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

fn reply(status: u16, body: impl Into<String>) -> Reply {
    Reply { status, body: body.into(), delay: Duration::ZERO }
}

/// Serves one scripted reply per connection, then stops.
fn serve(replies: Vec<Reply>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for r in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            log.lock().unwrap().push(Seen { path, auth, body: String::from_utf8(body).unwrap() });
            thread::sleep(r.delay);
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                r.status,
                r.body.len(),
                r.body
            );
        }
    });
    (url, seen)
}

fn policy(retries: usize) -> ClientPolicy {
    ClientPolicy {
        timeout: Duration::from_millis(500),
        max_retries: retries,
        backoff_base: Duration::from_millis(5),
        concurrency_cap: 2,
    }
}

fn client(url: &str, retries: usize) -> ChatClient {
    ChatClient::with_transport(url, Some("secret".into()), policy(retries), HttpTransport::default())
}

fn request() -> ChatRequest {
    ChatRequest::new("m", vec![ChatMessage::system("be brief"), ChatMessage::user("hello")])
}

#[test]
fn posts_openai_body_with_bearer() {
    let (url, seen) = serve(vec![reply(200, completion_body("hi there"))]);
    let resp = client(&url, 0).chat_complete(&request()).unwrap();
    assert_eq!(resp.text, "hi there");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "m");
    assert_eq!(body["messages"][1]["content"], "hello");
    assert_eq!(body["temperature"], 0.0);
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = serve(vec![reply(500, "oops"), reply(429, "slow down"), reply(200, completion_body("ok"))]);
    assert_eq!(client(&url, 3).chat_complete(&request()).unwrap().text, "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_retries() {
    let (url, seen) = serve((0..3).map(|_| reply(503, "down")).collect());
    let err = client(&url, 2).chat_complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::RetriesExhausted { attempts: 3, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, seen) = serve(vec![reply(401, "no"), reply(200, completion_body("unused"))]);
    assert_eq!(client(&url, 3).chat_complete(&request()).unwrap_err(), GatewayError::AuthError(401));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_protocol_error() {
    let (url, _) = serve(vec![reply(200, r#"{"choices":[{"message":{}}]}"#)]);
    assert!(matches!(client(&url, 0).chat_complete(&request()), Err(GatewayError::ProtocolError(_))));
}

#[test]
fn slow_server_times_out() {
    let slow = Reply { status: 200, body: completion_body("late"), delay: Duration::from_millis(1500) };
    let (url, _) = serve(vec![slow]);
    assert_eq!(client(&url, 0).chat_complete(&request()).unwrap_err(), GatewayError::Timeout);
}

#[test]
fn unreachable_host_exhausts_retries() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = client(&format!("http://127.0.0.1:{port}"), 1).chat_complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::RetriesExhausted { attempts: 2, .. }), "{err:?}");
}
