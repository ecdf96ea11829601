//! Line-delimited JSON request/response over a child process or HTTP.
//!
//! A subprocess endpoint is spawned lazily and kept alive: each request is
//! one JSON object written as a line on its stdin, each response one JSON
//! line on its stdout. An HTTP endpoint receives the same body as a POST.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Endpoint {
    /// Program plus arguments speaking line-delimited JSON on stdio.
    Subprocess { program: String, args: Vec<String> },
    /// Full URL of the POST route, e.g. `http://127.0.0.1:8080/complete`.
    Http { url: String },
}

impl Endpoint {
    /// Parse `cmd:<program> <args..>` / `http://...` / `https://...`.
    pub fn parse(spec: &str) -> Option<Endpoint> {
        if spec.starts_with("http://") || spec.starts_with("https://") {
            return Some(Endpoint::Http { url: spec.to_string() });
        }
        let cmd = spec.strip_prefix("cmd:")?;
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(Endpoint::Subprocess { program, args: parts.collect() })
    }
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct JsonClient {
    endpoint: Endpoint,
    timeout: Duration,
    process: Mutex<Option<Running>>,
}

impl JsonClient {
    pub fn new(endpoint: Endpoint, timeout: Duration) -> Self {
        JsonClient { endpoint, timeout, process: Mutex::new(None) }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn request(&self, body: &Value) -> Result<Value, TransportError> {
        match &self.endpoint {
            Endpoint::Subprocess { program, args } => self.request_subprocess(program, args, body),
            Endpoint::Http { url } => self.request_http(url, body),
        }
    }

    fn request_subprocess(&self, program: &str, args: &[String], body: &Value) -> Result<Value, TransportError> {
        let mut guard = self.process.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            *guard = Some(spawn(program, args)?);
        }
        let running = guard.as_mut().expect("spawned above");
        let mut line = serde_json::to_string(body).map_err(|e| TransportError::Protocol(e.to_string()))?;
        line.push('\n');
        if let Err(e) = running.stdin.write_all(line.as_bytes()).and_then(|_| running.stdin.flush()) {
            *guard = None;
            return Err(TransportError::Unavailable(format!("{program}: {e}")));
        }
        let reply = match running.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => {
                *guard = None;
                return Err(TransportError::Unavailable(format!("{program}: {e}")));
            }
            Err(RecvTimeoutError::Timeout) => {
                // The child may still answer late; drop it so the next
                // request does not read a stale line.
                *guard = None;
                return Err(TransportError::Timeout(self.timeout));
            }
            Err(RecvTimeoutError::Disconnected) => {
                *guard = None;
                return Err(TransportError::Unavailable(format!("{program} closed its output")));
            }
        };
        serde_json::from_str(&reply).map_err(|e| TransportError::Protocol(format!("bad JSON line {reply:?}: {e}")))
    }

    fn request_http(&self, url: &str, body: &Value) -> Result<Value, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| TransportError::Unavailable(e.to_string()))?;
        let resp = client.post(url).json(body).send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout(self.timeout)
            } else {
                TransportError::Unavailable(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TransportError::Unavailable(format!("{url} answered {status}")));
        }
        resp.json().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout(self.timeout)
            } else {
                TransportError::Protocol(e.to_string())
            }
        })
    }
}

fn spawn(program: &str, args: &[String]) -> Result<Running, TransportError> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| TransportError::Unavailable(format!("{program}: {e}")))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    Ok(Running { child, stdin, lines: rx })
}

#[cfg(test)]
pub(crate) mod testing {
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// One-shot HTTP server answering every connection with `status` and `body`.
    /// Returns the base URL.
    pub fn serve(status: u16, body: &'static str, connections: usize) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            for stream in listener.incoming().take(connections) {
                let mut stream = stream.unwrap();
                let mut buf = [0u8; 8192];
                let mut seen = Vec::new();
                // Read headers and the announced body.
                loop {
                    let n = stream.read(&mut buf).unwrap_or(0);
                    if n == 0 {
                        break;
                    }
                    seen.extend_from_slice(&buf[..n]);
                    let text = String::from_utf8_lossy(&seen);
                    if let Some(end) = text.find("\r\n\r\n") {
                        let len = text
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap_or(0)))
                            .unwrap_or(0);
                        if seen.len() >= end + 4 + len {
                            break;
                        }
                    }
                }
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        format!("http://{addr}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sh(script: &str) -> Endpoint {
        Endpoint::Subprocess { program: "sh".into(), args: vec!["-c".into(), script.into()] }
    }

    #[test]
    fn parse_endpoints() {
        assert_eq!(
            Endpoint::parse("cmd:python3 server.py --x"),
            Some(Endpoint::Subprocess { program: "python3".into(), args: vec!["server.py".into(), "--x".into()] })
        );
        assert_eq!(Endpoint::parse("http://h:1/complete"), Some(Endpoint::Http { url: "http://h:1/complete".into() }));
        assert_eq!(Endpoint::parse("nonsense"), None);
    }

    #[test]
    fn subprocess_round_trip_reuses_process() {
        let c = JsonClient::new(sh(r#"n=0; while read l; do n=$((n+1)); echo "{\"text\":\"$n\"}"; done"#), DEFAULT_TIMEOUT);
        assert_eq!(c.request(&json!({"prompt": "a"})).unwrap(), json!({"text": "1"}));
        assert_eq!(c.request(&json!({"prompt": "b"})).unwrap(), json!({"text": "2"}));
    }

    #[test]
    fn subprocess_timeout() {
        let c = JsonClient::new(sh("read l; sleep 5"), Duration::from_millis(200));
        assert!(matches!(c.request(&json!({})), Err(TransportError::Timeout(_))));
    }

    #[test]
    fn subprocess_garbage_and_missing_program() {
        let c = JsonClient::new(sh("while read l; do echo not-json; done"), DEFAULT_TIMEOUT);
        assert!(matches!(c.request(&json!({})), Err(TransportError::Protocol(_))));
        let c = JsonClient::new(
            Endpoint::Subprocess { program: "/nonexistent/binary".into(), args: vec![] },
            DEFAULT_TIMEOUT,
        );
        assert!(matches!(c.request(&json!({})), Err(TransportError::Unavailable(_))));
    }

    #[test]
    fn http_round_trip_and_error_status() {
        let base = testing::serve(200, r#"{"text":"hi"}"#, 1);
        let c = JsonClient::new(Endpoint::Http { url: format!("{base}/complete") }, DEFAULT_TIMEOUT);
        assert_eq!(c.request(&json!({"prompt": "x"})).unwrap(), json!({"text": "hi"}));

        let base = testing::serve(503, "{}", 1);
        let c = JsonClient::new(Endpoint::Http { url: format!("{base}/complete") }, DEFAULT_TIMEOUT);
        assert!(matches!(c.request(&json!({})), Err(TransportError::Unavailable(_))));
    }
}
