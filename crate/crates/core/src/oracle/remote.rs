use std::time::Duration;

use serde_json::json;
use sha2::{Digest, Sha256};

use super::{parse_response, Oracle, OracleResponse, Prompt};
use crate::error::{Error, Result};
use crate::http::JsonClient;

/// OpenAI-compatible chat-completions client.
#[derive(Debug, Clone)]
pub struct RemoteOracle {
    url: String,
    model: String,
    temperature: f64,
    max_in_flight: usize,
    client: JsonClient,
}

impl RemoteOracle {
    pub fn new(
        endpoint: &str,
        model: &str,
        temperature: f64,
        max_retries: u32,
        timeout_secs: f64,
        max_in_flight: usize,
    ) -> Result<Self> {
        if !(temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {temperature}")));
        }
        if !(timeout_secs > 0.0) {
            return Err(Error::Config("oracle timeout must be positive".into()));
        }
        Ok(Self {
            url: chat_url(endpoint),
            model: model.to_string(),
            temperature,
            max_in_flight: max_in_flight.max(1),
            client: JsonClient::new(Duration::from_secs_f64(timeout_secs), max_retries, Duration::from_millis(500)),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn chat_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/chat/completions") {
        base.to_string()
    } else if base.ends_with("/v1") {
        format!("{base}/chat/completions")
    } else {
        format!("{base}/v1/chat/completions")
    }
}

impl Oracle for RemoteOracle {
    fn query(&self, prompt: &Prompt) -> Result<OracleResponse> {
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": prompt.instruction},
                {"role": "user", "content": prompt.render_blocks()},
            ],
            "temperature": self.temperature,
        });
        let reply = self.client.post(&self.url, &body)?;
        let content = reply
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| Error::OracleParse {
                message: "reply has no choices[0].message.content".into(),
                raw: reply.to_string(),
            })?;
        parse_response(content)
    }

    fn fingerprint(&self) -> String {
        let desc = format!("remote/v1/{}/{}/t={}", self.url, self.model, self.temperature);
        hex::encode(Sha256::digest(desc.as_bytes()))
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}
