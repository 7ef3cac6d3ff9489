//! Chat backends: a chat-completion HTTP client and a deterministic mock.

use std::env;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::baselines::{idm_accel, IdmParams};
use crate::kinematics::step_spacing;

use super::prompt::{fmt_num, parse_history_block, RenderedHistory};

pub const DEFAULT_API_KEY_ENV: &str = "FOLLOWBENCH_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Transport-level failures. `Timeout`, `RateLimited` and `Server` are
/// retried; the rest fail immediately.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited by the server (HTTP 429)")]
    RateLimited,
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("server error (HTTP {status}): {body}")]
    Server { status: u16, body: String },
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<BackendError> },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout
                | BackendError::RateLimited
                | BackendError::Server { .. }
                | BackendError::Transport(_)
        )
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;

    /// Short identifier recorded in run manifests.
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model_name: String,
    pub api_key_env: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub temperature: f64,
    /// Requests per minute; 0 disables the limiter.
    pub rate_limit_per_min: f64,
    /// First retry delay; doubles on each further attempt.
    pub backoff_base_s: f64,
    /// Where request/response pairs are logged, if anywhere.
    #[serde(default)]
    pub log_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            model_name: "gpt-4".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_s: 60.0,
            max_retries: 3,
            temperature: 0.0,
            rate_limit_per_min: 60.0,
            backoff_base_s: 1.0,
            log_dir: None,
        }
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self::default()
    }

    pub fn remote(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Remote,
            base_url: Some(base_url.into()),
            model_name: model_name.into(),
            ..Self::default()
        }
    }

    /// Build the backend this config describes. Remote backends fail fast
    /// with `AuthFailure` when the key variable is unset.
    pub fn build(&self) -> Result<Box<dyn ChatBackend>, BackendError> {
        match self.kind {
            BackendKind::Mock => Ok(Box::new(MockBackend::default())),
            BackendKind::Remote => Ok(Box::new(RemoteBackend::new(self.clone())?)),
        }
    }
}

/// Deterministic offline backend.
///
/// Reads the history table back out of the last user message, runs IDM from
/// the current state over the requested horizon with the leader speed held,
/// and answers in the structured format with the speed rounded to 2 decimals.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub params: IdmParams,
}

impl MockBackend {
    pub fn new(params: IdmParams) -> Self {
        Self { params }
    }

    /// The speed the mock answers for a rendered history, before rounding.
    pub fn idm_speed(&self, history: &RenderedHistory) -> f64 {
        let now = history.rows[history.rows.len() - 1];
        let steps = (history.horizon / history.dt).round().max(1.0) as usize;
        let dt = history.horizon / steps as f64;
        let lv = now.lv_speed;
        let (mut v, mut s, mut dv) = (now.fv_speed, now.spacing, now.rel_speed);
        for _ in 0..steps {
            let a = idm_accel(&self.params, v, -dv, s).unwrap_or(-8.0).clamp(-8.0, 5.0);
            v = (v + a * dt).max(0.0);
            let dv_next = lv - v;
            s = step_spacing(s, dv, dv_next, dt).unwrap_or(s);
            dv = dv_next;
        }
        v
    }

    /// The speed that appears in the reply: [`MockBackend::idm_speed`] rounded to 2 decimals.
    pub fn reply_speed(&self, history: &RenderedHistory) -> f64 {
        (self.idm_speed(history) * 100.0).round() / 100.0
    }

    fn explain(&self, history: &RenderedHistory, speed: f64) -> String {
        let first = history.rows[0];
        let now = history.rows[history.rows.len() - 1];
        let lv_trend = trend(now.lv_speed - first.lv_speed, "speeding up", "slowing down", "holding its speed");
        let gap_trend = trend(now.spacing - first.spacing, "opened", "closed", "stayed about the same");
        let action = trend(speed - now.fv_speed, "speed up", "slow down", "hold its speed");
        format!(
            "Over the last {} s the lead vehicle has been {lv_trend} and the gap has {gap_trend} \
(now {} m with a relative speed of {} m/s). To keep a safe following distance the following \
vehicle should {action}, reaching about {} m/s.",
            fmt_num(-first.t),
            fmt_num(now.spacing),
            fmt_num(now.rel_speed),
            fmt_num(speed)
        )
    }
}

fn trend(delta: f64, up: &'static str, down: &'static str, flat: &'static str) -> &'static str {
    if delta > 0.05 {
        up
    } else if delta < -0.05 {
        down
    } else {
        flat
    }
}

impl ChatBackend for MockBackend {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let history = messages
            .iter()
            .rev()
            .filter(|m| m.role == Role::User)
            .find_map(|m| parse_history_block(&m.content));
        let Some(history) = history else {
            return Ok("I cannot determine the speed without the car-following history.".into());
        };
        let speed = self.reply_speed(&history);
        Ok(format!(
            "The following vehicle adapts to the lead vehicle.\nPredicted speed: {speed:.2} m/s\nExplanation: {}",
            self.explain(&history, speed)
        ))
    }

    fn describe(&self) -> String {
        "mock-idm".into()
    }
}

/// Spaces requests so that no more than `per_minute` start in any minute.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(per_minute: f64) -> Self {
        let interval = if per_minute > 0.0 {
            Duration::from_secs_f64(60.0 / per_minute)
        } else {
            Duration::ZERO
        };
        Self {
            interval,
            next_slot: Mutex::new(None),
        }
    }

    /// Block until the caller may send.
    pub fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut slot = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let start = match *slot {
                Some(t) if t > now => t,
                _ => now,
            };
            *slot = Some(start + self.interval);
            start - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

/// Chat-completion client (`POST {base_url}/chat/completions`).
pub struct RemoteBackend {
    config: BackendConfig,
    api_key: String,
    agent: ureq::Agent,
    limiter: RateLimiter,
    request_counter: AtomicU64,
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        if config.base_url.as_deref().is_none_or(str::is_empty) {
            return Err(BackendError::Config("remote backend needs a base_url".into()));
        }
        let api_key = match env::var(&config.api_key_env) {
            Ok(k) if !k.is_empty() => k,
            _ => {
                return Err(BackendError::AuthFailure(format!(
                    "environment variable {} is not set",
                    config.api_key_env
                )))
            }
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s.max(0.001))))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = RateLimiter::new(config.rate_limit_per_min);
        if let Some(dir) = &config.log_dir {
            fs::create_dir_all(dir).map_err(|e| BackendError::Config(format!("{}: {e}", dir.display())))?;
        }
        Ok(Self {
            config,
            api_key,
            agent,
            limiter,
            request_counter: AtomicU64::new(0),
        })
    }

    fn endpoint(&self) -> String {
        let base = self.config.base_url.as_deref().unwrap_or_default().trim_end_matches('/');
        format!("{base}/chat/completions")
    }

    fn request_body(&self, messages: &[ChatMessage]) -> Value {
        json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": messages,
        })
    }

    fn send_once(&self, body: &Value) -> Result<String, BackendError> {
        self.limiter.acquire();
        let response = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let mut response = match response {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout),
            Err(e) => return Err(BackendError::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout),
            Err(e) => return Err(BackendError::Transport(e.to_string())),
        };
        match status {
            200..=299 => extract_content(&text),
            401 | 403 => Err(BackendError::AuthFailure(format!("HTTP {status}"))),
            408 => Err(BackendError::Timeout),
            429 => Err(BackendError::RateLimited),
            500..=599 => Err(BackendError::Server { status, body: text }),
            _ => Err(BackendError::Rejected { status, body: text }),
        }
    }

    fn log(&self, id: u64, request: &Value, outcome: &Result<String, BackendError>) {
        let Some(dir) = &self.config.log_dir else {
            return;
        };
        let entry = json!({
            "endpoint": self.endpoint(),
            "authorization": "Bearer <redacted>",
            "request": request,
            "reply": outcome.as_ref().ok(),
            "error": outcome.as_ref().err().map(|e| e.to_string()),
        });
        let path = dir.join(format!("request_{id:06}.json"));
        // logging is best effort
        let _ = fs::write(path, serde_json::to_string_pretty(&entry).unwrap_or_default());
    }
}

/// Pull `choices[0].message.content` out of a chat-completion response.
pub fn extract_content(body: &str) -> Result<String, BackendError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedReply(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::MalformedReply("missing choices[0].message.content".into()))
}

impl ChatBackend for RemoteBackend {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let body = self.request_body(messages);
        let id = self.request_counter.fetch_add(1, Ordering::Relaxed);
        let attempts = self.config.max_retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_base_s * 2f64.powi(attempt as i32 - 1);
                thread::sleep(Duration::from_secs_f64(delay.max(0.0)));
            }
            let outcome = self.send_once(&body);
            self.log(id, &body, &outcome);
            match outcome {
                Ok(reply) => return Ok(reply),
                Err(e) if e.is_retryable() => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(BackendError::Exhausted {
            attempts,
            last: Box::new(last.expect("at least one attempt")),
        })
    }

    fn describe(&self) -> String {
        format!(
            "remote:{}:{}",
            self.config.base_url.as_deref().unwrap_or_default(),
            self.config.model_name
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::StepState;
    use crate::llm::prompt::{build_system_message, build_user_message, TaskConfig};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn equilibrium_history() -> Vec<StepState> {
        // IDM default congested equilibrium at 6 m/s
        let p = IdmParams::default();
        let v = 6.0;
        let s = (p.s0 + v * p.t_headway) / (1.0 - (v / p.v0).powf(p.delta)).sqrt();
        (0..41).map(|i| StepState::new(i as f64 * 0.1, s, v, v)).collect()
    }

    fn messages(h: &[StepState]) -> Vec<ChatMessage> {
        let task = TaskConfig::default();
        vec![
            ChatMessage::system(build_system_message(&task)),
            ChatMessage::user(build_user_message(h, 0.1, &task).unwrap()),
        ]
    }

    #[test]
    fn mock_answers_idm_speed() {
        let h = equilibrium_history();
        let mock = MockBackend::default();
        let reply = mock.chat(&messages(&h)).unwrap();
        // independent oracle: the equilibrium is a fixed point, speed stays 6
        assert!(reply.contains("Predicted speed: 6.00 m/s"), "{reply}");
        assert!(reply.contains("Explanation: "));
        assert_eq!(reply, mock.chat(&messages(&h)).unwrap());
    }

    #[test]
    fn mock_without_history_is_unparseable_text() {
        let reply = MockBackend::default()
            .chat(&[ChatMessage::user("hello")])
            .unwrap();
        assert!(!reply.contains("Predicted speed"));
    }

    #[test]
    fn remote_requires_key() {
        let mut cfg = BackendConfig::remote("http://127.0.0.1:9", "m");
        cfg.api_key_env = "FOLLOWBENCH_TEST_KEY_THAT_IS_NOT_SET".into();
        assert!(matches!(cfg.build(), Err(BackendError::AuthFailure(_))));
    }

    /// Serves canned (status, body) responses, one per connection.
    fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let mut requests = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                requests.push(format!("{head}{}", String::from_utf8_lossy(&buf)));
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            requests
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn remote_config(base: String, key_env: &str) -> BackendConfig {
        // each test uses its own variable name
        env::set_var(key_env, "sk-test");
        BackendConfig {
            api_key_env: key_env.into(),
            backoff_base_s: 0.01,
            rate_limit_per_min: 0.0,
            timeout_s: 5.0,
            ..BackendConfig::remote(base, "test-model")
        }
    }

    #[test]
    fn remote_retries_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"Predicted speed: 4.00 m/s\nExplanation: ok"}}]}"#;
        let (base, handle) = serve(vec![
            (429, "{}".into()),
            (503, "busy".into()),
            (200, ok.into()),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = remote_config(base, "FOLLOWBENCH_TEST_KEY_RETRY");
        cfg.log_dir = Some(dir.path().to_path_buf());
        let backend = cfg.build().unwrap();
        let reply = backend.chat(&[ChatMessage::user("hi")]).unwrap();
        assert_eq!(reply, "Predicted speed: 4.00 m/s\nExplanation: ok");
        let requests = handle.join().unwrap();
        assert_eq!(requests.len(), 3);
        assert!(requests[0].starts_with("POST /v1/chat/completions"));
        assert!(requests[0].contains("Bearer sk-test"));
        let body = requests[2].split("\r\n\r\n").nth(1).unwrap();
        let v: Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["model"], "test-model");
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["messages"][0]["role"], "user");
        let log = fs::read_to_string(dir.path().join("request_000000.json")).unwrap();
        assert!(log.contains("<redacted>"));
        assert!(!log.contains("sk-test"));
    }

    #[test]
    fn remote_auth_failure_is_not_retried() {
        let (base, handle) = serve(vec![(401, "{}".into())]);
        let backend = remote_config(base, "FOLLOWBENCH_TEST_KEY_AUTH").build().unwrap();
        assert!(matches!(
            backend.chat(&[ChatMessage::user("hi")]),
            Err(BackendError::AuthFailure(_))
        ));
        assert_eq!(handle.join().unwrap().len(), 1);
    }

    #[test]
    fn remote_gives_up_after_max_retries() {
        let (base, handle) = serve(vec![(500, "a".into()), (500, "b".into())]);
        let mut cfg = remote_config(base, "FOLLOWBENCH_TEST_KEY_EXHAUST");
        cfg.max_retries = 1;
        let backend = cfg.build().unwrap();
        match backend.chat(&[ChatMessage::user("hi")]) {
            Err(BackendError::Exhausted { attempts, last }) => {
                assert_eq!(attempts, 2);
                assert!(matches!(*last, BackendError::Server { status: 500, .. }));
            }
            other => panic!("{other:?}"),
        }
        handle.join().unwrap();
    }

    #[test]
    fn malformed_body() {
        assert!(matches!(extract_content("nope"), Err(BackendError::MalformedReply(_))));
        assert!(matches!(
            extract_content(r#"{"choices":[]}"#),
            Err(BackendError::MalformedReply(_))
        ));
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let limiter = RateLimiter::new(1200.0); // one per 50 ms
        let start = Instant::now();
        for _ in 0..3 {
            limiter.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(100));
    }
}
