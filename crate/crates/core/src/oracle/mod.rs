//! Prompt assembly, LLM access and probability extraction.

mod mock;
mod prompt;
mod remote;
mod response;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use mock::{KeywordRule, MockOracle, MockRules};
pub use prompt::{build_prompt, build_prompt_with, Prompt, DEFAULT_INSTRUCTION};
pub use remote::RemoteOracle;
pub use response::{parse_response, OracleResponse};

use crate::error::{Error, Result};

pub trait Oracle: Send + Sync {
    fn query(&self, prompt: &Prompt) -> Result<OracleResponse>;

    /// Identifies the oracle's behaviour; stored alongside delta matrices.
    fn fingerprint(&self) -> String;

    fn max_in_flight(&self) -> usize {
        1
    }
}

fn default_temperature() -> f64 {
    0.0
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    60.0
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    Remote {
        endpoint: String,
        model: String,
        #[serde(default = "default_temperature")]
        temperature: f64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
    /// Rules inline, or a JSON fixture path.
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixture: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rules: Option<MockRules>,
    },
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec::Mock {
            fixture: None,
            rules: Some(MockRules::default()),
        }
    }
}

impl OracleSpec {
    pub fn mock(rules: MockRules) -> Self {
        OracleSpec::Mock {
            fixture: None,
            rules: Some(rules),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Oracle>> {
        Ok(match self {
            OracleSpec::Remote {
                endpoint,
                model,
                temperature,
                max_retries,
                timeout_secs,
                max_in_flight,
            } => Arc::new(RemoteOracle::new(
                endpoint,
                model,
                *temperature,
                *max_retries,
                *timeout_secs,
                *max_in_flight,
            )?),
            OracleSpec::Mock { rules: Some(rules), .. } => Arc::new(MockOracle::new(rules.clone())?),
            OracleSpec::Mock {
                fixture: Some(path),
                rules: None,
            } => Arc::new(MockOracle::new(MockRules::load(path)?)?),
            OracleSpec::Mock {
                fixture: None,
                rules: None,
            } => return Err(Error::Config("mock oracle needs `rules` or `fixture`".into())),
        })
    }
}

/// Sends `prompt` to the oracle described by `spec`.
pub fn query_oracle(prompt: &Prompt, spec: &OracleSpec) -> Result<OracleResponse> {
    spec.build()?.query(prompt)
}

/// Counts every query forwarded to the inner oracle.
pub struct CountingOracle {
    inner: Arc<dyn Oracle>,
    calls: AtomicUsize,
}

impl CountingOracle {
    pub fn new(inner: Arc<dyn Oracle>) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Oracle for CountingOracle {
    fn query(&self, prompt: &Prompt) -> Result<OracleResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.query(prompt)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}

/// Passes through the first `budget` queries, then fails every call with a
/// transport error. Models an endpoint going away mid-run.
pub struct FailAfter {
    inner: Arc<dyn Oracle>,
    budget: usize,
    calls: AtomicUsize,
}

impl FailAfter {
    pub fn new(inner: Arc<dyn Oracle>, budget: usize) -> Self {
        Self {
            inner,
            budget,
            calls: AtomicUsize::new(0),
        }
    }
}

impl Oracle for FailAfter {
    fn query(&self, prompt: &Prompt) -> Result<OracleResponse> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(Error::Transport {
                message: "endpoint unavailable".into(),
                retryable: false,
            });
        }
        self.inner.query(prompt)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}
