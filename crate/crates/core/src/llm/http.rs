use std::io::Read;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

impl HttpResponse {
    /// The body of a 2xx response. 429 and 5xx map to the retryable
    /// [`Error::Transport`]; other statuses to [`Error::Http`].
    pub fn into_success(self) -> Result<String> {
        match self.status {
            200..=299 => Ok(self.body),
            429 | 500..=599 => Err(Error::Transport(format!(
                "HTTP {}: {}",
                self.status,
                snippet(&self.body)
            ))),
            status => Err(Error::Http {
                status,
                message: snippet(&self.body),
            }),
        }
    }
}

fn snippet(body: &str) -> String {
    const MAX: usize = 300;
    match body.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

/// Minimal blocking HTTP client. Implementations report connection-level
/// failures as [`Error::Transport`] and return every status code as a
/// response.
pub trait HttpTransport: Send + Sync {
    fn get(&self, url: &str, query: &[(&str, &str)]) -> Result<HttpResponse>;

    fn post_json(&self, url: &str, headers: &[(&str, &str)], body: &str) -> Result<HttpResponse>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
    user_agent: String,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            user_agent: concat!("ddx/", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }

    fn finish(
        resp: std::result::Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<HttpResponse> {
        let mut resp = resp.map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let mut body = String::new();
        resp.body_mut()
            .as_reader()
            .read_to_string(&mut body)
            .map_err(|e| Error::Transport(format!("reading response body: {e}")))?;
        Ok(HttpResponse { status, body })
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl HttpTransport for UreqTransport {
    fn get(&self, url: &str, query: &[(&str, &str)]) -> Result<HttpResponse> {
        let mut req = self.agent.get(url).header("User-Agent", &self.user_agent);
        for (k, v) in query {
            req = req.query(*k, *v);
        }
        Self::finish(req.call())
    }

    fn post_json(&self, url: &str, headers: &[(&str, &str)], body: &str) -> Result<HttpResponse> {
        let mut req = self
            .agent
            .post(url)
            .header("User-Agent", &self.user_agent)
            .content_type("application/json");
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        Self::finish(req.send(body))
    }
}

/// Exponential backoff for transient failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64
            .checked_shl(retry.saturating_sub(1))
            .unwrap_or(u64::MAX);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }

    /// Run `op` until it succeeds, fails permanently or attempts run out.
    /// Returns the value and the number of attempts used.
    pub fn run<T>(&self, mut op: impl FnMut(u32) -> Result<T>) -> Result<(T, u32)> {
        let max = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok((v, attempt)),
                Err(e) if e.is_transient() && attempt < max => {
                    thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(Error::Transport(msg)) => {
                    return Err(Error::Transport(format!(
                        "{msg} (after {attempt} attempts)"
                    )))
                }
                Err(e) => return Err(e),
            }
        }
    }
}
