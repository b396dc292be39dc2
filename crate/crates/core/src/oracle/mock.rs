use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Oracle, OracleResponse, Prompt};
use crate::corpus::Label;
use crate::error::{Error, Result};

/// One keyword entry of the mock rule table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordRule {
    pub keyword: String,
    /// Contribution per occurrence in the query.
    #[serde(default)]
    pub weight: f64,
    /// Keywords sharing a concept count as matching each other across demos.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
    /// How strongly a demo carrying this keyword moves the query.
    #[serde(default = "one")]
    pub demo_strength: f64,
}

fn one() -> f64 {
    1.0
}

/// Deterministic stand-in for an LLM.
///
/// `p = sigmoid(bias + Σ weight·count(query, kw) + adj)`, where `adj` is
/// `demo_weight` times the mean signed strength of the demonstrations that
/// share a keyword (or a keyword's concept) with the query. Anomalous demos
/// push up, normal demos push down; a demo's strength is the largest
/// `demo_strength` among its keywords that match the query.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRules {
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub keywords: Vec<KeywordRule>,
    #[serde(default)]
    pub demo_weight: f64,
}

impl MockRules {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let rules: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        rules.validate()?;
        Ok(rules)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.bias.is_finite()
            && self.demo_weight.is_finite()
            && self
                .keywords
                .iter()
                .all(|k| k.weight.is_finite() && k.demo_strength.is_finite());
        if !finite {
            return Err(Error::Config("mock rules contain non-finite numbers".into()));
        }
        if let Some(k) = self.keywords.iter().find(|k| k.keyword.is_empty()) {
            return Err(Error::Config(format!("empty mock keyword (concept {:?})", k.concept)));
        }
        Ok(())
    }

    fn present<'a>(&'a self, text: &str) -> Vec<&'a KeywordRule> {
        self.keywords.iter().filter(|k| text.contains(&k.keyword)).collect()
    }

    /// Probability the mock assigns to `prompt`, with a short explanation.
    pub fn evaluate(&self, prompt: &Prompt) -> (f64, String) {
        let query = prompt.query.joined_text();
        let in_query = self.present(&query);
        let query_keywords: BTreeSet<&str> = in_query.iter().map(|k| k.keyword.as_str()).collect();
        let query_concepts: BTreeSet<&str> = in_query.iter().filter_map(|k| k.concept.as_deref()).collect();

        let evidence: f64 = in_query
            .iter()
            .map(|k| k.weight * query.matches(k.keyword.as_str()).count() as f64)
            .sum();

        let mut matched = 0usize;
        let mut pull = 0.0;
        for (demo, label) in &prompt.demonstrations {
            let strength = self
                .present(&demo.joined_text())
                .into_iter()
                .filter(|k| {
                    query_keywords.contains(k.keyword.as_str())
                        || k.concept.as_deref().is_some_and(|c| query_concepts.contains(c))
                })
                .map(|k| k.demo_strength)
                .reduce(f64::max);
            if let Some(s) = strength {
                matched += 1;
                pull += match label {
                    Label::Anomalous => s,
                    Label::Normal => -s,
                };
            }
        }
        let adjustment = if matched == 0 {
            0.0
        } else {
            self.demo_weight * pull / matched as f64
        };
        let p = sigmoid(self.bias + evidence + adjustment).clamp(0.0, 1.0);
        let why = format!(
            "query keywords [{}]; {matched} of {} demonstrations share a keyword",
            query_keywords.into_iter().collect::<Vec<_>>().join(", "),
            prompt.demonstrations.len()
        );
        (p, why)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct MockOracle {
    rules: MockRules,
    fingerprint: String,
}

impl MockOracle {
    pub fn new(rules: MockRules) -> Result<Self> {
        rules.validate()?;
        let canonical = serde_json::to_string(&rules)?;
        let fingerprint = format!("mock/v1/{}", hex::encode(Sha256::digest(canonical.as_bytes())));
        Ok(Self { rules, fingerprint })
    }

    pub fn rules(&self) -> &MockRules {
        &self.rules
    }
}

impl Oracle for MockOracle {
    fn query(&self, prompt: &Prompt) -> Result<OracleResponse> {
        let (p, why) = self.rules.evaluate(prompt);
        let reasoning = prompt.cot_enabled.then_some(why);
        let raw = OracleResponse::format(p, reasoning.as_deref());
        super::parse_response(&raw)
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn max_in_flight(&self) -> usize {
        rayon::current_num_threads()
    }
}
