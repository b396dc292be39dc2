//! Log corpora: regex preprocessing, grouping into labeled sequences,
//! chronological splitting and JSONL persistence.
//!
//! Preprocessing is parser-free. Rules strip headers such as timestamps
//! and line counters; dynamic parameters (IP addresses, block ids) stay in
//! the text so the downstream model can reason over them.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Binary ground truth of a line or sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Label {
    #[default]
    Normal,
    Anomalous,
}

impl Label {
    pub fn from_u8(value: u8) -> Option<Self> {
        match value {
            0 => Some(Label::Normal),
            1 => Some(Label::Anomalous),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }

    pub fn word(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = u8::deserialize(deserializer)?;
        Label::from_u8(value)
            .ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {value}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawLogLine {
    pub line_no: usize,
    pub text: String,
    pub label: Option<Label>,
    pub session_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSequence {
    pub id: String,
    pub domain: String,
    pub label: Label,
    pub messages: Vec<String>,
}

impl LogSequence {
    /// Separator placed between messages when a sequence is rendered as one text.
    pub const SEPARATOR: &'static str = " ;-; ";

    pub fn joined_text(&self) -> String {
        self.messages.join(Self::SEPARATOR)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    sequences: Vec<LogSequence>,
    domains: BTreeSet<String>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and empty messages.
    pub fn new(sequences: Vec<LogSequence>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(sequences.len());
        let mut domains = BTreeSet::new();
        for seq in &sequences {
            if !seen.insert(seq.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate sequence id {:?}", seq.id)));
            }
            if seq.messages.is_empty() {
                return Err(Error::InvalidInput(format!("sequence {:?} has no messages", seq.id)));
            }
            if seq.messages.iter().any(|m| m.is_empty()) {
                return Err(Error::InvalidInput(format!("sequence {:?} has an empty message", seq.id)));
            }
            domains.insert(seq.domain.clone());
        }
        Ok(Self { sequences, domains })
    }

    pub fn sequences(&self) -> &[LogSequence] {
        &self.sequences
    }

    pub fn domains(&self) -> &BTreeSet<String> {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LogSequence> {
        self.sequences.iter().find(|s| s.id == id)
    }

    /// Id → position lookup table.
    pub fn positions(&self) -> HashMap<&str, usize> {
        self.sequences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    /// Concatenates corpora in order; ids must stay unique.
    pub fn concat(parts: &[&Corpus]) -> Result<Self> {
        let sequences = parts
            .iter()
            .flat_map(|c| c.sequences.iter().cloned())
            .collect();
        Self::new(sequences)
    }

    pub fn into_sequences(self) -> Vec<LogSequence> {
        self.sequences
    }
}

/// One `(pattern, replacement)` preprocessing rule as written in config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub pattern: String,
    #[serde(default)]
    pub replacement: String,
}

/// Compiled, ordered preprocessing rules.
#[derive(Debug, Clone, Default)]
pub struct Preprocessor {
    rules: Vec<(Regex, String)>,
}

impl Preprocessor {
    pub fn compile(specs: &[RuleSpec]) -> Result<Self> {
        let rules = specs
            .iter()
            .map(|spec| {
                Regex::new(&spec.pattern)
                    .map(|re| (re, spec.replacement.clone()))
                    .map_err(|e| Error::Config(format!("invalid rule pattern {:?}: {e}", spec.pattern)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { rules })
    }

    pub fn apply(&self, raw: &str) -> String {
        let mut text = raw.to_string();
        for (re, replacement) in &self.rules {
            text = re.replace_all(&text, replacement.as_str()).into_owned();
        }
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

/// Applies `rules` left to right, then collapses whitespace.
pub fn preprocess_line(raw: &str, rules: &Preprocessor) -> String {
    rules.apply(raw)
}

fn any_anomalous(labels: impl IntoIterator<Item = Option<Label>>) -> Label {
    labels
        .into_iter()
        .flatten()
        .max()
        .unwrap_or(Label::Normal)
}

#[derive(Debug, Clone)]
pub struct SessionGrouping {
    pub sequences: Vec<LogSequence>,
    /// Lines without a session key.
    pub unmatched: usize,
}

/// Groups lines by the first capture group of `key_pattern`.
///
/// Sessions appear in order of first occurrence; lines that do not match are
/// dropped and counted.
pub fn group_by_session(lines: &[RawLogLine], key_pattern: &Regex, domain: &str) -> Result<SessionGrouping> {
    if key_pattern.captures_len() < 2 {
        return Err(Error::Config(format!(
            "session key pattern {:?} needs a capture group",
            key_pattern.as_str()
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<&RawLogLine>> = HashMap::new();
    let mut unmatched = 0;
    for line in lines {
        let key = line.session_key.clone().or_else(|| {
            key_pattern
                .captures(&line.text)
                .and_then(|c| c.get(1))
                .map(|m| m.as_str().to_string())
        });
        match key {
            Some(key) => {
                let entry = members.entry(key.clone()).or_default();
                if entry.is_empty() {
                    order.push(key);
                }
                entry.push(line);
            }
            None => unmatched += 1,
        }
    }
    if order.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no line matched session pattern {:?}",
            key_pattern.as_str()
        )));
    }
    if unmatched > 0 {
        log::warn!("{domain}: dropped {unmatched} lines without a session key");
    }
    let sequences = order
        .into_iter()
        .map(|key| {
            let lines = &members[&key];
            LogSequence {
                id: key.clone(),
                domain: domain.to_string(),
                label: any_anomalous(lines.iter().map(|l| l.label)),
                messages: lines.iter().map(|l| l.text.clone()).collect(),
            }
        })
        .collect();
    Ok(SessionGrouping { sequences, unmatched })
}

/// Splits lines into consecutive non-overlapping windows of `window_size`.
pub fn group_by_window(
    lines: &[RawLogLine],
    window_size: usize,
    domain: &str,
    drop_partial: bool,
) -> Result<Vec<LogSequence>> {
    if window_size == 0 {
        return Err(Error::Config("window_size must be at least 1".into()));
    }
    if lines.is_empty() {
        return Err(Error::EmptyCorpus(format!("{domain}: no lines to window")));
    }
    Ok(lines
        .chunks(window_size)
        .filter(|chunk| !drop_partial || chunk.len() == window_size)
        .enumerate()
        .map(|(i, chunk)| LogSequence {
            id: format!("{domain}-w{i:07}"),
            domain: domain.to_string(),
            label: any_anomalous(chunk.iter().map(|l| l.label)),
            messages: chunk.iter().map(|l| l.text.clone()).collect(),
        })
        .collect())
}

/// First `train_count` sequences train, the next `test_count` test. No shuffling.
pub fn chronological_split(corpus: &Corpus, train_count: usize, test_count: usize) -> Result<(Corpus, Corpus)> {
    let needed = train_count
        .checked_add(test_count)
        .ok_or_else(|| Error::InvalidInput("split counts overflow".into()))?;
    if needed > corpus.len() {
        return Err(Error::InvalidInput(format!(
            "split needs {needed} sequences but corpus has {}",
            corpus.len()
        )));
    }
    let seqs = corpus.sequences();
    let train = Corpus::new(seqs[..train_count].to_vec())?;
    let test = Corpus::new(seqs[train_count..needed].to_vec())?;
    Ok((train, test))
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: Option<String>,
    domain: Option<String>,
    label: Option<Label>,
    messages: Option<Vec<String>>,
}

pub fn load_corpus_jsonl(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut sequences = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let missing = |field: &str| Error::MissingField {
            path: path.to_path_buf(),
            field: field.to_string(),
            line: line_no,
        };
        let seq = LogSequence {
            id: record.id.ok_or_else(|| missing("id"))?,
            domain: record.domain.ok_or_else(|| missing("domain"))?,
            label: record.label.ok_or_else(|| missing("label"))?,
            messages: record.messages.ok_or_else(|| missing("messages"))?,
        };
        if seq.messages.is_empty() || seq.messages.iter().any(|m| m.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "messages must be a non-empty list of non-empty strings".into(),
            });
        }
        sequences.push(seq);
    }
    Corpus::new(sequences)
}

pub fn save_corpus_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    for seq in corpus.sequences() {
        serde_json::to_writer(&mut out, seq)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    out.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// How per-line ground truth is encoded in a raw log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LabelConvention {
    #[default]
    None,
    /// First whitespace token is `-` for normal lines and an alert tag otherwise
    /// (BGL, Thunderbird, Liberty). The token is removed from the text.
    LeadingMarker,
    /// CSV file of `key,label` rows (HDFS `anomaly_label.csv`); label is
    /// `Anomaly`/`Normal` or `1`/`0`. Applied after session grouping.
    SessionFile { path: std::path::PathBuf },
}

/// Reads a raw log file, applying the label convention and preprocessing.
/// Lines that are empty after preprocessing are skipped.
pub fn load_raw_lines(path: &Path, convention: &LabelConvention, rules: &Preprocessor) -> Result<Vec<RawLogLine>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut lines = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let (body, label) = match convention {
            LabelConvention::LeadingMarker => {
                let trimmed = line.trim_start();
                let (marker, rest) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
                let label = if marker == "-" { Label::Normal } else { Label::Anomalous };
                (rest.to_string(), Some(label))
            }
            _ => (line, None),
        };
        let text = preprocess_line(&body, rules);
        if text.is_empty() {
            continue;
        }
        lines.push(RawLogLine {
            line_no: idx + 1,
            text,
            label,
            session_key: None,
        });
    }
    Ok(lines)
}

/// Reads a `key,label` CSV into a lookup table.
pub fn load_session_labels(path: &Path) -> Result<HashMap<String, Label>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut labels = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let Some((key, value)) = line.split_once(',') else {
            continue;
        };
        let label = match value.trim() {
            "Anomaly" | "anomaly" | "1" => Label::Anomalous,
            "Normal" | "normal" | "0" => Label::Normal,
            _ if idx == 0 => continue,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: format!("unknown label {other:?}"),
                })
            }
        };
        labels.insert(key.trim().to_string(), label);
    }
    Ok(labels)
}
