use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub probability: f64,
    pub reasoning: Option<String>,
    pub raw: String,
}

impl OracleResponse {
    /// Canonical JSON form `{"probability": p, "reasoning": r?}`.
    pub fn format(probability: f64, reasoning: Option<&str>) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("probability".into(), Value::from(probability));
        if let Some(r) = reasoning {
            obj.insert("reasoning".into(), Value::from(r));
        }
        Value::Object(obj).to_string()
    }
}

fn fallback_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)probability\D*?(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)").expect("valid regex"))
}

fn check_range(p: f64, raw: &str) -> Result<f64> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::OracleParse {
            message: format!("probability {p} outside [0, 1]"),
            raw: raw.to_string(),
        })
    }
}

/// First JSON object embedded anywhere in `text`.
fn first_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    text.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Extracts the anomaly probability: JSON object first, then the first number
/// after the word "probability". Out-of-range values are errors, never clamped.
pub fn parse_response(text: &str) -> Result<OracleResponse> {
    if let Some(obj) = first_json_object(text) {
        if let Some(p) = obj.get("probability").and_then(Value::as_f64) {
            let reasoning = obj.get("reasoning").and_then(Value::as_str).map(str::to_string);
            return Ok(OracleResponse {
                probability: check_range(p, text)?,
                reasoning,
                raw: text.to_string(),
            });
        }
    }
    let caps = fallback_pattern().captures(text).ok_or_else(|| Error::OracleParse {
        message: "no probability found".into(),
        raw: text.to_string(),
    })?;
    let p: f64 = caps[1].parse().map_err(|_| Error::OracleParse {
        message: format!("bad number {:?}", &caps[1]),
        raw: text.to_string(),
    })?;
    Ok(OracleResponse {
        probability: check_range(p, text)?,
        reasoning: None,
        raw: text.to_string(),
    })
}
