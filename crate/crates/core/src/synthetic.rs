//! Two-domain synthetic log corpus with planted cross-domain equivalences.
//!
//! The source domain writes verbose lowercase English; the target domain
//! writes terse uppercase controller codes. The two share no words. Each
//! anomaly concept has one phrasing per domain, and the companion mock
//! oracle understands only the source phrasing: a target anomaly is
//! recognised when the prompt carries a source demonstration of the same
//! concept.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, LogSequence};
use crate::error::Result;
use crate::oracle::{KeywordRule, MockRules};

pub const SOURCE_DOMAIN: &str = "alpha";
pub const TARGET_DOMAIN: &str = "beta";

struct Concept {
    name: &'static str,
    source_line: &'static str,
    source_keyword: &'static str,
    target_line: &'static str,
    target_keyword: &'static str,
}

const CONCEPTS: [Concept; 4] = [
    Concept {
        name: "memory",
        source_line: "node r{a}: uncorrectable memory error, machine check halted the kernel",
        source_keyword: "machine check",
        target_line: "U{a} MEMFLT ECC-DBL HALT",
        target_keyword: "ECC-DBL",
    },
    Concept {
        name: "storage",
        source_line: "disk controller {a} reported unrecoverable read failure on volume {n}",
        source_keyword: "unrecoverable read",
        target_line: "STOR{a} ERR BLKRD NAK",
        target_keyword: "BLKRD",
    },
    Concept {
        name: "network",
        source_line: "network interface eth{a} lost carrier, link down",
        source_keyword: "lost carrier",
        target_line: "COMM{a} TMO LNK-DN",
        target_keyword: "LNK-DN",
    },
    Concept {
        name: "power",
        source_line: "power supply {a} failure, emergency shutdown initiated",
        source_keyword: "emergency shutdown",
        target_line: "PWR{a} TRIP ESD-ACT",
        target_keyword: "ESD-ACT",
    },
];

const SOURCE_PROFILES: [[&str; 4]; 4] = [
    [
        "scheduler dispatched job {n} to rack {a}",
        "job {n} heartbeat acknowledged",
        "rack {a} temperature nominal at {t} celsius",
        "network link on rack {a} stable",
    ],
    [
        "mount point scratch{a} healthy",
        "filesystem sync completed in {t} milliseconds",
        "metadata server answered lookup {n}",
        "quota check passed for user {n}",
    ],
    [
        "authentication granted for operator {n}",
        "session {n} opened from console {a}",
        "audit record {n} stored",
        "session {n} closed normally",
    ],
    [
        "power supply {a} reading {t} watts",
        "fan tray {a} speed adjusted",
        "voltage regulator {a} within limits",
        "chassis {a} inventory refreshed",
    ],
];

const TARGET_PROFILES: [[&str; 4]; 4] = [
    ["SEQ#{n} STEP ADV OK", "PLC-{a} SCAN {t}US", "IOBUS{a} POLL ACK", "TMR{a} RST"],
    ["VLV{a} POS={t}", "PMP-{a} RPM={n}", "FLW{a} {t}LPM", "TNK{a} LVL={t}"],
    ["HMI{a} LOGIN UID{n}", "HMI{a} VIEW PG{t}", "ALRM ACK UID{n}", "HMI{a} LOGOUT UID{n}"],
    ["PSU{a} V={t}", "CAB{a} TMP={t}C", "UPS{a} BATT={t}", "BLWR{a} RUN"],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub window: usize,
    pub source_train: usize,
    pub source_train_anomalies: usize,
    pub target_train: usize,
    pub target_train_anomalies: usize,
    pub target_test: usize,
    pub target_test_anomalies: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            window: 10,
            source_train: 160,
            source_train_anomalies: 40,
            target_train: 40,
            target_train_anomalies: 8,
            target_test: 50,
            target_test_anomalies: 20,
        }
    }
}

pub struct SyntheticCorpus {
    pub train: Corpus,
    pub test: Corpus,
    pub rules: MockRules,
}

fn fill(template: &str, rng: &mut ChaCha8Rng, hex: bool) -> String {
    let a: u32 = rng.random_range(0..16);
    let n: u32 = rng.random_range(100..10000);
    let t: u32 = rng.random_range(10..99);
    let (a, n, t) = if hex {
        (format!("{a:X}"), format!("{n:X}"), format!("{t:X}"))
    } else {
        (a.to_string(), n.to_string(), t.to_string())
    };
    template.replace("{a}", &a).replace("{n}", &n).replace("{t}", &t)
}

fn window(rng: &mut ChaCha8Rng, source: bool, len: usize, concept: Option<&Concept>) -> Vec<String> {
    let profiles = if source { &SOURCE_PROFILES } else { &TARGET_PROFILES };
    let profile = profiles.choose(rng).expect("profiles");
    let mut lines: Vec<String> = (0..len)
        .map(|_| fill(profile.choose(rng).expect("templates"), rng, !source))
        .collect();
    if let Some(c) = concept {
        let line = if source { c.source_line } else { c.target_line };
        let copies = rng.random_range(4..=5);
        for _ in 0..copies {
            let at = rng.random_range(0..len);
            lines[at] = fill(line, rng, !source);
        }
    }
    lines
}

fn block(
    rng: &mut ChaCha8Rng,
    source: bool,
    prefix: &str,
    count: usize,
    anomalies: usize,
    spec: &SyntheticSpec,
) -> Vec<LogSequence> {
    let mut labels: Vec<Option<usize>> = (0..count)
        .map(|i| (i < anomalies).then_some(i % CONCEPTS.len()))
        .collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, concept)| LogSequence {
            id: format!("{prefix}-{i:04}"),
            domain: (if source { SOURCE_DOMAIN } else { TARGET_DOMAIN }).to_string(),
            label: if concept.is_some() { Label::Anomalous } else { Label::Normal },
            messages: window(rng, source, spec.window, concept.map(|c| &CONCEPTS[c])),
        })
        .collect()
}

/// Builds the corpus and the companion oracle rules.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = block(
        &mut rng,
        true,
        "alpha-train",
        spec.source_train,
        spec.source_train_anomalies,
        spec,
    );
    train.extend(block(
        &mut rng,
        false,
        "beta-train",
        spec.target_train,
        spec.target_train_anomalies,
        spec,
    ));
    let test = block(
        &mut rng,
        false,
        "beta-test",
        spec.target_test,
        spec.target_test_anomalies,
        spec,
    );
    Ok(SyntheticCorpus {
        train: Corpus::new(train)?,
        test: Corpus::new(test)?,
        rules: mock_rules(),
    })
}

/// The oracle reads source phrasings fluently and target codes not at all:
/// a matched source demonstration pushes hard, a matched target one only
/// dilutes the average.
pub fn mock_rules() -> MockRules {
    let mut keywords = Vec::new();
    for c in &CONCEPTS {
        keywords.push(KeywordRule {
            keyword: c.source_keyword.to_string(),
            weight: 0.0,
            concept: Some(c.name.to_string()),
            demo_strength: 1.0,
        });
        keywords.push(KeywordRule {
            keyword: c.target_keyword.to_string(),
            weight: 0.0,
            concept: Some(c.name.to_string()),
            demo_strength: 0.0,
        });
    }
    MockRules {
        bias: -2.0,
        keywords,
        demo_weight: 4.0,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn words(c: &Corpus, domain: &str) -> BTreeSet<String> {
        c.sequences()
            .iter()
            .filter(|s| s.domain == domain)
            .flat_map(|s| s.messages.iter())
            .flat_map(|m| m.split(|ch: char| !ch.is_alphabetic()))
            .filter(|w| w.len() > 1)
            .map(str::to_lowercase)
            .collect()
    }

    #[test]
    fn shape_and_determinism() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.len(), 200);
        assert_eq!(a.test.len(), 50);
        let anomalies = |c: &Corpus, d: &str| {
            c.sequences()
                .iter()
                .filter(|s| s.domain == d && s.label == Label::Anomalous)
                .count()
        };
        assert_eq!(anomalies(&a.train, SOURCE_DOMAIN), 40);
        assert_eq!(anomalies(&a.train, TARGET_DOMAIN), 8);
        assert_eq!(anomalies(&a.test, TARGET_DOMAIN), 20);
    }

    #[test]
    fn vocabularies_are_disjoint() {
        let c = generate(&SyntheticSpec::default()).unwrap();
        let src = words(&c.train, SOURCE_DOMAIN);
        let mut tgt = words(&c.train, TARGET_DOMAIN);
        tgt.extend(words(&c.test, TARGET_DOMAIN));
        let shared: Vec<_> = src.intersection(&tgt).collect();
        assert!(shared.is_empty(), "{shared:?}");
    }

    #[test]
    fn anomalies_carry_exactly_one_concept() {
        let c = generate(&SyntheticSpec::default()).unwrap();
        let rules = mock_rules();
        for s in c.train.sequences().iter().chain(c.test.sequences()) {
            let text = s.joined_text();
            let hits: BTreeSet<_> = rules
                .keywords
                .iter()
                .filter(|k| text.contains(&k.keyword))
                .map(|k| k.concept.clone())
                .collect();
            match s.label {
                Label::Anomalous => assert_eq!(hits.len(), 1, "{}", s.id),
                Label::Normal => assert!(hits.is_empty(), "{}", s.id),
            }
        }
    }
}
