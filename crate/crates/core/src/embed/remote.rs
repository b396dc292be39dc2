use std::time::Duration;

use serde_json::json;
use sha2::{Digest, Sha256};

use super::{Backbone, EmbeddingVector};
use crate::error::{Error, Result};
use crate::http::JsonClient;

/// OpenAI-compatible embeddings endpoint:
/// `{"model", "input": [..]}` → `{"data": [{"embedding": [..]}]}`.
#[derive(Debug, Clone)]
pub struct RemoteBackbone {
    endpoint: String,
    model: String,
    dim: usize,
    max_in_flight: usize,
    client: JsonClient,
}

impl RemoteBackbone {
    pub fn new(endpoint: &str, model: &str, dim: usize, timeout_secs: f64, max_in_flight: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("backbone dim must be at least 2, got {dim}")));
        }
        if !(timeout_secs > 0.0) {
            return Err(Error::Config("backbone timeout must be positive".into()));
        }
        Ok(Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            dim,
            max_in_flight: max_in_flight.max(1),
            client: JsonClient::new(Duration::from_secs_f64(timeout_secs), 3, Duration::from_millis(250)),
        })
    }
}

impl Backbone for RemoteBackbone {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        let desc = format!("remote/v1/{}/{}/dim={}", self.endpoint, self.model, self.dim);
        hex::encode(Sha256::digest(desc.as_bytes()))
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let reply = self
            .client
            .post(&self.endpoint, &json!({ "model": self.model, "input": texts }))?;
        let bad = |msg: &str| Error::Transport {
            message: format!("embedding response: {msg}"),
            retryable: false,
        };
        let data = reply
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| bad("missing data array"))?;
        if data.len() != texts.len() {
            return Err(bad(&format!("expected {} embeddings, got {}", texts.len(), data.len())));
        }
        data.iter()
            .map(|item| {
                let values: Vec<f64> = item
                    .get("embedding")
                    .and_then(|e| e.as_array())
                    .ok_or_else(|| bad("missing embedding"))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric embedding entry")))
                    .collect::<Result<_>>()?;
                if values.len() != self.dim {
                    return Err(bad(&format!("expected dim {}, got {}", self.dim, values.len())));
                }
                Ok(EmbeddingVector::new(values))
            })
            .collect()
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}
