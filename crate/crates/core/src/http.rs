//! Blocking JSON-over-HTTP helper shared by the remote embedder and the
//! chat-completion backend.

use std::io::Read;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use serde_json::Value;

const BODY_EXCERPT_BYTES: usize = 512;

static NEXT_REQUEST_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique request id, sent as `x-request-id`.
pub fn next_request_id() -> String {
    format!("lte-{}", NEXT_REQUEST_ID.fetch_add(1, Ordering::Relaxed))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HttpError {
    #[error("request {request_id}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        request_id: String,
        attempts: u32,
        message: String,
    },
    #[error("request {request_id}: HTTP {status}: {body}")]
    Status {
        request_id: String,
        status: u16,
        body: String,
    },
    #[error("request {request_id}: timed out")]
    Timeout { request_id: String },
    #[error("request {request_id}: bad response: {message}")]
    Protocol { request_id: String, message: String },
}

impl HttpError {
    pub fn request_id(&self) -> &str {
        match self {
            HttpError::Transport { request_id, .. }
            | HttpError::Status { request_id, .. }
            | HttpError::Timeout { request_id }
            | HttpError::Protocol { request_id, .. } => request_id,
        }
    }
}

/// Retry policy for transport-level failures. HTTP status errors and
/// timeouts are never retried.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_secs(2),
        }
    }
}

pub fn build_agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

fn is_timeout(t: &ureq::Transport) -> bool {
    let mut src: Option<&(dyn std::error::Error + 'static)> = std::error::Error::source(t);
    while let Some(e) = src {
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            if matches!(
                io.kind(),
                std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
            ) {
                return true;
            }
        }
        src = e.source();
    }
    false
}

fn excerpt(mut body: String) -> String {
    if body.len() > BODY_EXCERPT_BYTES {
        let mut cut = BODY_EXCERPT_BYTES;
        while !body.is_char_boundary(cut) {
            cut -= 1;
        }
        body.truncate(cut);
        body.push_str("...");
    }
    body
}

/// POSTs `body` as JSON and decodes a JSON response. Returns the request id
/// along with the body so callers can cite it in later errors.
pub fn post_json(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    body: &Value,
    retry: RetryPolicy,
) -> Result<(String, Value), HttpError> {
    let request_id = next_request_id();
    let mut backoff = retry.initial_backoff;
    let mut attempt = 0;
    loop {
        attempt += 1;
        let mut req = agent
            .post(url)
            .set("content-type", "application/json")
            .set("x-request-id", &request_id);
        if let Some(token) = bearer {
            req = req.set("authorization", &format!("Bearer {token}"));
        }
        match req.send_json(body) {
            Ok(resp) => {
                let mut text = String::new();
                resp.into_reader()
                    .read_to_string(&mut text)
                    .map_err(|e| HttpError::Protocol {
                        request_id: request_id.clone(),
                        message: format!("reading body: {e}"),
                    })?;
                return match serde_json::from_str(&text) {
                    Ok(v) => Ok((request_id, v)),
                    Err(e) => Err(HttpError::Protocol {
                        request_id,
                        message: format!("invalid JSON: {e}"),
                    }),
                };
            }
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                return Err(HttpError::Status {
                    request_id,
                    status,
                    body: excerpt(body),
                });
            }
            Err(ureq::Error::Transport(t)) => {
                if is_timeout(&t) {
                    return Err(HttpError::Timeout { request_id });
                }
                if attempt > retry.max_retries {
                    return Err(HttpError::Transport {
                        request_id,
                        attempts: attempt,
                        message: t.to_string(),
                    });
                }
                tracing::warn!(%request_id, attempt, error = %t, "transport error, retrying");
                thread::sleep(backoff);
                backoff = (backoff * 2).min(retry.max_backoff);
            }
        }
    }
}

/// Reads an optional bearer token from the environment; empty values count
/// as unset.
pub fn token_from_env(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|s| !s.is_empty())
}
