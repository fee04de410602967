//! HTTP client for an external text-generation service, and a local mock of
//! that service.
//!
//! Wire format: `POST` with JSON `{"prompt", "skeleton_tokens", "max_tokens"}`;
//! the reply is JSON whose `text` field holds the completion.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable holding the bearer token sent to the remote service.
pub const API_KEY_ENV: &str = "EMOTOK_REMOTE_API_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub prompt: String,
    pub skeleton_tokens: Vec<Vec<f64>>,
    pub max_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Attempts after the first one.
    pub retries: u32,
    /// Delay before the first retry; doubles for each further retry.
    pub backoff_ms: u64,
    pub max_connections: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            timeout_ms: 10_000,
            retries: 2,
            backoff_ms: 200,
            max_connections: 4,
        }
    }
}

pub struct RemoteClient {
    config: RemoteConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Retry(Error),
    Fail(Error),
}

impl RemoteClient {
    /// Reads the bearer token from [`API_KEY_ENV`] when it is set.
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(config: RemoteConfig, api_key: Option<String>) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::param("remote endpoint is not configured"));
        }
        if config.max_connections == 0 {
            return Err(Error::param("max_connections must be positive"));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .connect_timeout(Duration::from_millis(config.timeout_ms))
            .pool_max_idle_per_host(config.max_connections)
            .build()
            .map_err(|e| Error::Transport {
                message: e.to_string(),
                attempts: 0,
            })?;
        Ok(Self {
            config,
            api_key,
            http,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(
        &self,
        request: &RemoteRequest,
        attempts: u32,
    ) -> std::result::Result<String, Attempt> {
        let mut call = self.http.post(&self.config.endpoint).json(request);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(|e| self.classify(e, attempts))?;
        let status = response.status();
        let body = response.text().map_err(|e| self.classify(e, attempts))?;
        if !status.is_success() {
            let err = Error::Status {
                status: status.as_u16(),
                body: body.chars().take(200).collect(),
            };
            return Err(if status.is_server_error() {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            });
        }
        extract_text(&body).map_err(Attempt::Fail)
    }

    fn classify(&self, e: reqwest::Error, attempts: u32) -> Attempt {
        if e.is_timeout() || e.is_connect() {
            Attempt::Retry(Error::Timeout {
                endpoint: self.config.endpoint.clone(),
                attempts,
            })
        } else {
            Attempt::Retry(Error::Transport {
                message: e.without_url().to_string(),
                attempts,
            })
        }
    }

    /// One completion, retrying timeouts, connection failures and 5xx replies
    /// with exponential backoff.
    pub fn decode(&self, request: &RemoteRequest) -> Result<String> {
        let total = self.config.retries + 1;
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 1;
        loop {
            match self.attempt(request, attempt) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= total => return Err(e),
                Err(Attempt::Retry(_)) => {
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

/// The completion stored under `text` in a JSON reply.
pub fn extract_text(body: &str) -> Result<String> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| Error::Schema(format!("response body is not JSON: {e}")))?;
    match value.get("text") {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(Error::Schema(format!(
            "field `text` is not a string: {other}"
        ))),
        None => Err(Error::Schema("missing field `text`".into())),
    }
}

/// What the mock service answers.
#[derive(Clone, Debug, PartialEq)]
pub enum MockBehaviour {
    /// `{"text": …}` with status 200.
    Reply(String),
    /// The given status and raw body.
    Raw { status: u16, body: String },
    /// Waits, then replies like [`MockBehaviour::Reply`].
    Delay { delay: Duration, text: String },
}

/// A request as the mock received it.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedRequest {
    pub path: String,
    pub authorization: Option<String>,
    pub body: Option<RemoteRequest>,
}

/// Single-threaded HTTP service on an ephemeral localhost port.
pub struct MockServer {
    url: String,
    stop: Arc<AtomicBool>,
    recorded: Arc<Mutex<Vec<RecordedRequest>>>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(behaviour: MockBehaviour) -> Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(|e| Error::Transport {
            message: format!("mock server failed to bind: {e}"),
            attempts: 0,
        })?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| Error::param("mock server has no IP address"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let recorded = Arc::new(Mutex::new(Vec::new()));
        let (stop_t, rec_t) = (stop.clone(), recorded.clone());
        let handle = std::thread::spawn(move || {
            while !stop_t.load(Ordering::SeqCst) {
                let Ok(Some(mut req)) = server.recv_timeout(Duration::from_millis(20)) else {
                    continue;
                };
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let authorization = req
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv("Authorization"))
                    .map(|h| h.value.as_str().to_string());
                rec_t.lock().expect("mock log").push(RecordedRequest {
                    path: req.url().to_string(),
                    authorization,
                    body: serde_json::from_str(&body).ok(),
                });
                let (status, reply) = match &behaviour {
                    MockBehaviour::Reply(t) => (200, serde_json::json!({ "text": t }).to_string()),
                    MockBehaviour::Raw { status, body } => (*status, body.clone()),
                    MockBehaviour::Delay { delay, text } => {
                        std::thread::sleep(*delay);
                        (200, serde_json::json!({ "text": text }).to_string())
                    }
                };
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
                    .expect("static header");
                let _ = req.respond(
                    tiny_http::Response::from_string(reply)
                        .with_status_code(status)
                        .with_header(header),
                );
            }
        });
        Ok(Self {
            url: format!("http://127.0.0.1:{port}/generate"),
            stop,
            recorded,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.recorded.lock().expect("mock log").clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> RemoteRequest {
        RemoteRequest {
            prompt: "p".into(),
            skeleton_tokens: vec![vec![0.5, -1.0]],
            max_tokens: 8,
        }
    }

    fn client(url: &str, timeout_ms: u64, retries: u32) -> RemoteClient {
        RemoteClient::with_api_key(
            RemoteConfig {
                endpoint: url.into(),
                timeout_ms,
                retries,
                backoff_ms: 10,
                ..RemoteConfig::default()
            },
            Some("secret-token".into()),
        )
        .unwrap()
    }

    #[test]
    fn reply_is_returned_verbatim() {
        let server =
            MockServer::start(MockBehaviour::Reply("This is a happy person.".into())).unwrap();
        let c = client(server.url(), 2000, 0);
        assert_eq!(c.decode(&request()).unwrap(), "This is a happy person.");
        let got = server.requests();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].body.as_ref().unwrap(), &request());
        assert_eq!(got[0].authorization.as_deref(), Some("Bearer secret-token"));
        assert!(!format!("{c:?}").contains("secret-token"));
    }

    #[test]
    fn malformed_body_names_the_field() {
        let server = MockServer::start(MockBehaviour::Raw {
            status: 200,
            body: r#"{"choices": []}"#.into(),
        })
        .unwrap();
        match client(server.url(), 2000, 0).decode(&request()) {
            Err(Error::Schema(m)) => assert!(m.contains("text"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn server_errors_are_retried_then_reported() {
        let server = MockServer::start(MockBehaviour::Raw {
            status: 503,
            body: "busy".into(),
        })
        .unwrap();
        assert!(matches!(
            client(server.url(), 2000, 2).decode(&request()),
            Err(Error::Status { status: 503, .. })
        ));
        assert_eq!(server.requests().len(), 3);
        let bad = MockServer::start(MockBehaviour::Raw {
            status: 400,
            body: "no".into(),
        })
        .unwrap();
        assert!(matches!(
            client(bad.url(), 2000, 2).decode(&request()),
            Err(Error::Status { status: 400, .. })
        ));
        assert_eq!(bad.requests().len(), 1);
    }

    #[test]
    fn slow_and_unreachable_endpoints_time_out() {
        let server = MockServer::start(MockBehaviour::Delay {
            delay: Duration::from_millis(400),
            text: "late".into(),
        })
        .unwrap();
        match client(server.url(), 100, 1).decode(&request()) {
            Err(Error::Timeout { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("{other:?}"),
        }
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        match client(&format!("http://127.0.0.1:{port}/generate"), 200, 2).decode(&request()) {
            Err(Error::Timeout { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_extraction() {
        assert_eq!(extract_text(r#"{"text": "a", "x": 1}"#).unwrap(), "a");
        assert!(matches!(extract_text("nope"), Err(Error::Schema(_))));
        assert!(matches!(
            extract_text(r#"{"text": 3}"#),
            Err(Error::Schema(_))
        ));
    }
}
