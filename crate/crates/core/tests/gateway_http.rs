//! Gateway against a local HTTP server scripted per connection.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use qkg_core::llm::{ChatMessage, Gateway, GatewayConfig, HttpBackend, RoleConfig, RunLog};
use qkg_core::QkgError;

struct Served {
    bodies: Vec<String>,
    auth: Vec<Option<String>>,
}

/// Answers connection `i` with `replies[i]` (status, body) and records requests.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Served>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let served = Arc::new(Mutex::new(Served {
        bodies: Vec::new(),
        auth: Vec::new(),
    }));
    let log = served.clone();
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut length = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                if name.eq_ignore_ascii_case("content-length") {
                    length = value.trim().parse().unwrap();
                }
                if name.eq_ignore_ascii_case("authorization") {
                    auth = Some(value.trim().to_string());
                }
            }
            let mut buf = vec![0u8; length];
            reader.read_exact(&mut buf).unwrap();
            {
                let mut s = log.lock().unwrap();
                s.bodies.push(String::from_utf8(buf).unwrap());
                s.auth.push(auth);
            }
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (url, served, handle)
}

fn gateway(url: &str, retries: u32) -> Gateway {
    let mut role = RoleConfig::new("reasoner");
    role.endpoint = url.into();
    role.model = "test-model".into();
    role.max_retries = retries;
    role.backoff_ms = 1;
    role.timeout_secs = 10;
    role.api_key_env = Some("QKG_TEST_GATEWAY_KEY".into());
    let mut cfg = GatewayConfig::default();
    cfg.roles.insert("reasoner".into(), role);
    Gateway::new(cfg, Arc::new(HttpBackend::new())).with_log(RunLog::in_memory())
}

fn ok_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn retries_server_errors_then_succeeds() {
    std::env::set_var("QKG_TEST_GATEWAY_KEY", "sekret");
    let (url, served, handle) = serve(vec![
        (503, "{}".into()),
        (500, "{}".into()),
        (200, ok_body("{\"llm_answer_choice\": \"C\"}")),
    ]);
    let gw = gateway(&url, 3);
    let text = gw
        .complete("reasoner", &[ChatMessage::system("s"), ChatMessage::user("q")])
        .unwrap();
    handle.join().unwrap();
    assert_eq!(text, "{\"llm_answer_choice\": \"C\"}");
    let served = served.lock().unwrap();
    assert_eq!(served.bodies.len(), 3);
    let body: serde_json::Value = serde_json::from_str(&served.bodies[0]).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][1]["content"], "q");
    assert_eq!(served.auth[0].as_deref(), Some("Bearer sekret"));
    let log = gw.run_log().exchanges();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].attempts, 3);
    assert_eq!(log[0].attempt_errors.len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    std::env::set_var("QKG_TEST_GATEWAY_KEY", "sekret");
    let (url, served, handle) = serve(vec![(400, "{\"error\": \"bad\"}".into())]);
    let gw = gateway(&url, 3);
    let err = gw.complete("reasoner", &[ChatMessage::user("q")]).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, QkgError::RetriesExhausted { attempts: 1, .. }), "{err}");
    assert_eq!(served.lock().unwrap().bodies.len(), 1);
}

#[test]
fn exhaustion_reports_attempts() {
    std::env::set_var("QKG_TEST_GATEWAY_KEY", "sekret");
    let (url, _, handle) = serve(vec![(429, "{}".into()), (429, "{}".into())]);
    let gw = gateway(&url, 1);
    let err = gw.complete("reasoner", &[ChatMessage::user("q")]).unwrap_err();
    handle.join().unwrap();
    match err {
        QkgError::RetriesExhausted {
            attempts, last_error, ..
        } => {
            assert_eq!(attempts, 2);
            assert!(last_error.contains("429"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn unknown_role_is_an_error() {
    let gw = gateway("http://127.0.0.1:9/unused", 0);
    assert!(matches!(gw.complete("validator", &[]), Err(QkgError::UnknownRole(_))));
}
