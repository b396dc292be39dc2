use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LogSequence};

/// Task framing plus output contract. Replaceable through config.
pub const DEFAULT_INSTRUCTION: &str = "You are an expert in system log analysis. \
Your task is binary log-sequence anomaly detection: decide whether the final log sequence \
(the query) is normal or anomalous. Each log sequence lists its messages separated by \" ;-; \". \
Labeled example sequences may precede the query; use them as reference cases. \
Respond with a single JSON object {\"probability\": p} where p is a number between 0 and 1 \
giving the probability that the query sequence is anomalous.";

const COT_SUFFIX: &str = " Before deciding, reason step by step about which events indicate a fault \
and how they relate to the examples, and include that diagnostic explanation in the JSON object as \
{\"probability\": p, \"reasoning\": \"...\"}.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub instruction: String,
    pub demonstrations: Vec<(LogSequence, Label)>,
    pub query: LogSequence,
    pub cot_enabled: bool,
}

impl Prompt {
    /// The instruction followed by every demonstration and then the query.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(256 * (self.demonstrations.len() + 2));
        out.push_str(&self.instruction);
        out.push_str("\n\n");
        out.push_str(&self.render_blocks());
        out
    }

    /// Demonstration and query blocks without the instruction.
    pub fn render_blocks(&self) -> String {
        let mut out = String::new();
        for (i, (seq, label)) in self.demonstrations.iter().enumerate() {
            out.push_str(&format!(
                "### Example {}\nLog: {}\nLabel: {}\n\n",
                i + 1,
                seq.joined_text(),
                label.word()
            ));
        }
        out.push_str(&format!("### Query\nLog: {}\nLabel: ?\n", self.query.joined_text()));
        out
    }
}

/// Builds a prompt with the default instruction.
pub fn build_prompt(demos: &[(LogSequence, Label)], query: &LogSequence, cot: bool) -> Prompt {
    build_prompt_with(DEFAULT_INSTRUCTION, demos, query, cot)
}

pub fn build_prompt_with(instruction: &str, demos: &[(LogSequence, Label)], query: &LogSequence, cot: bool) -> Prompt {
    let mut instruction = instruction.to_string();
    if cot {
        instruction.push_str(COT_SUFFIX);
    }
    Prompt {
        instruction,
        demonstrations: demos.to_vec(),
        query: query.clone(),
        cot_enabled: cot,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, msgs: &[&str], label: Label) -> LogSequence {
        LogSequence {
            id: id.into(),
            domain: "BGL".into(),
            label,
            messages: msgs.iter().map(|m| m.to_string()).collect(),
        }
    }

    #[test]
    fn zero_shot_has_one_log_block() {
        let q = seq("q", &["generating core.2516", "generating core.2517"], Label::Anomalous);
        let text = build_prompt(&[], &q, false).render();
        assert_eq!(text.matches("Log: ").count(), 1);
        assert!(text.contains("Log: generating core.2516 ;-; generating core.2517\nLabel: ?"));
        assert!(text.contains("\"probability\""));
    }

    #[test]
    fn demos_precede_query_in_order() {
        let q = seq("q", &["query msg"], Label::Normal);
        let d1 = seq("a", &["first demo"], Label::Normal);
        let d2 = seq("b", &["second demo"], Label::Anomalous);
        let demos = vec![(d1, Label::Normal), (d2, Label::Anomalous)];
        let text = build_prompt(&demos, &q, false).render();
        let i1 = text.find("first demo").unwrap();
        let i2 = text.find("second demo").unwrap();
        let iq = text.find("query msg").unwrap();
        assert!(i1 < i2 && i2 < iq);
        assert!(text.contains("Log: first demo\nLabel: normal"));
        assert!(text.contains("Log: second demo\nLabel: anomalous"));
        assert_eq!(text, build_prompt(&demos, &q, false).render());
    }

    #[test]
    fn cot_asks_for_reasoning() {
        let q = seq("q", &["x"], Label::Normal);
        assert!(build_prompt(&[], &q, true).render().contains("\"reasoning\""));
        assert!(!build_prompt(&[], &q, false).render().contains("\"reasoning\""));
    }
}
