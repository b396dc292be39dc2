//! Blocking JSON-over-HTTP with bounded exponential backoff.

use std::time::Duration;

use serde_json::Value;

use crate::error::{Error, Result};

/// Environment variable holding the bearer token for remote endpoints.
pub const API_KEY_ENV: &str = "LOGICL_API_KEY";

#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    agent: ureq::Agent,
    max_retries: u32,
    backoff: Duration,
}

impl JsonClient {
    pub fn new(timeout: Duration, max_retries: u32, backoff: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            agent,
            max_retries,
            backoff,
        }
    }

    /// POSTs `body` and returns the decoded JSON reply. Connection failures,
    /// timeouts, 429 and 5xx responses are retried; other statuses are not.
    pub fn post(&self, url: &str, body: &Value) -> Result<Value> {
        let token = std::env::var(API_KEY_ENV).ok();
        let mut attempt = 0;
        loop {
            match self.post_once(url, body, token.as_deref()) {
                Ok(v) => return Ok(v),
                Err(Error::Transport { message, retryable }) if retryable && attempt < self.max_retries => {
                    let wait = self.backoff * 2u32.saturating_pow(attempt);
                    log::warn!("{url}: {message}; retrying in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(Error::Transport { message, .. }) => {
                    return Err(Error::Transport {
                        message: format!("{message} (after {} attempts)", attempt + 1),
                        retryable: false,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, url: &str, body: &Value, token: Option<&str>) -> Result<Value> {
        let mut request = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = token {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| Error::Transport {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| Error::Transport {
            message: e.to_string(),
            retryable: true,
        })?;
        if !(200..300).contains(&status) {
            return Err(Error::Transport {
                message: format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
                retryable: status == 429 || status >= 500,
            });
        }
        serde_json::from_str(&text).map_err(|e| Error::Transport {
            message: format!("invalid JSON body: {e}"),
            retryable: false,
        })
    }
}
