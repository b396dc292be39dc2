//! Pipeline configuration: one TOML or JSON file, every section defaulted.
//!
//! Relative paths are kept as written and resolved against the directory of
//! the config file when used, so the serialized config is location-free.

use std::fmt;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{LabelConvention, RuleSpec};
use crate::embed::BackboneSpec;
use crate::error::{Error, Result};
use crate::infer::InferenceConfig;
use crate::oracle::{MockRules, OracleSpec};
use crate::synthetic::SyntheticSpec;
use crate::train::{LossWeights, TrainConfig};

/// One failed constraint, addressed by its dotted config path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        path: path.into(),
        message: message.into(),
    }
}

pub const ENV_STATE_DIR: &str = "LOGICL_STATE_DIR";
pub const ENV_SEED: &str = "LOGICL_SEED";
pub const ENV_LLM_ENDPOINT: &str = "LOGICL_LLM_ENDPOINT";
pub const ENV_LLM_MODEL: &str = "LOGICL_LLM_MODEL";

/// Known dataset layouts and their grouping conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Hdfs,
    Bgl,
    Thunderbird,
    Liberty,
}

pub const HDFS_SESSION_PATTERN: &str = r"(blk_-?\d+)";

impl Preset {
    pub fn grouping(self) -> Grouping {
        match self {
            Preset::Hdfs => Grouping::Session {
                key_pattern: HDFS_SESSION_PATTERN.to_string(),
            },
            Preset::Bgl | Preset::Thunderbird => Grouping::Window {
                window_size: 40,
                drop_partial: false,
            },
            Preset::Liberty => Grouping::Window {
                window_size: 30,
                drop_partial: false,
            },
        }
    }

    /// HDFS ships labels per block in a separate file, so it has no line
    /// convention of its own.
    pub fn labels(self) -> LabelConvention {
        match self {
            Preset::Hdfs => LabelConvention::None,
            _ => LabelConvention::LeadingMarker,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Grouping {
    Session {
        key_pattern: String,
    },
    Window {
        window_size: usize,
        #[serde(default)]
        drop_partial: bool,
    },
}

/// One raw log file, grouped into sequences of one domain and split
/// chronologically into a training prefix and the test slice after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSource {
    pub domain: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// Overrides the preset's grouping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<Grouping>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelConvention>,
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
    pub train_count: usize,
    #[serde(default)]
    pub test_count: usize,
}

impl RawSource {
    pub fn effective_grouping(&self) -> Option<Grouping> {
        self.grouping.clone().or_else(|| self.preset.map(Preset::grouping))
    }

    pub fn effective_labels(&self) -> LabelConvention {
        self.labels
            .clone()
            .or_else(|| self.preset.map(Preset::labels))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Already grouped sequences.
    Jsonl { train: PathBuf, test: PathBuf },
    Raw { sources: Vec<RawSource> },
    /// The generated two-domain corpus.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            spec: SyntheticSpec::default(),
        }
    }
}

/// The head is square over the backbone dimension and starts as the identity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: BackboneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveConfig {
    pub mmr_lambda: f64,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        Self { mmr_lambda: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaConfig {
    pub k_candidates: usize,
    pub checkpoint_every: usize,
    /// Continue from an interrupted build's checkpoint.
    pub resume: bool,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        Self {
            k_candidates: 128,
            checkpoint_every: 100,
            resume: true,
        }
    }
}

/// `[train]` holds the optimiser settings with the loss weights nested under
/// `[train.weights]`. The training seed is the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSection {
    pub config: TrainConfig,
    pub weights: LossWeights,
}

impl Serialize for TrainSection {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = match serde_json::to_value(&self.config).map_err(serde::ser::Error::custom)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("TrainConfig serializes to an object"),
        };
        map.remove("seed");
        map.insert(
            "weights".into(),
            serde_json::to_value(self.weights).map_err(serde::ser::Error::custom)?,
        );
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TrainSection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut map = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
        if map.contains_key("seed") {
            return Err(D::Error::custom("train.seed is not configurable; set the top-level seed"));
        }
        let weights = match map.remove("weights") {
            Some(w) => serde_json::from_value(w).map_err(|e| D::Error::custom(format!("train.weights: {e}")))?,
            None => LossWeights::default(),
        };
        let config = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| D::Error::custom(format!("train: {e}")))?;
        Ok(Self { config, weights })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub state_dir: PathBuf,
    /// Defaults to `report.json` inside the state directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Record stage wall-clock seconds in the report. Off by default so that
    /// identical runs produce identical reports.
    pub report_wall_clock: bool,
    /// Write the paired source/target alignment CSVs during `eval`.
    pub export_alignment: bool,
    /// Sequences per domain in the alignment CSVs.
    pub alignment_limit: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            state_dir: PathBuf::from("state"),
            report: None,
            report_wall_clock: false,
            export_alignment: true,
            alignment_limit: 64,
        }
    }
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub retrieve: RetrieveConfig,
    #[serde(default)]
    pub delta: DeltaConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub infer: InferenceConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            oracle: OracleSpec::default(),
            retrieve: RetrieveConfig::default(),
            delta: DeltaConfig::default(),
            train: TrainSection::default(),
            infer: InferenceConfig::default(),
            output: OutputConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Values supplied on the command line. Environment variables fill the gaps.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub state_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub llm_endpoint: Option<String>,
    pub llm_model: Option<String>,
    pub llm_timeout: Option<f64>,
    /// `Some(None)` swaps in the mock oracle with the configured or default
    /// rules, `Some(Some(path))` loads rules from `path`.
    pub mock_oracle: Option<Option<PathBuf>>,
}

impl PipelineConfig {
    /// Parses `path` as JSON when it ends in `.json`, TOML otherwise.
    pub fn from_str_as(text: &str, json: bool, origin: &Path) -> Result<Self> {
        let mut cfg: Self = if json {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?
        };
        cfg.base_dir = origin
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::from_str_as(&text, json, path)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn state_dir(&self) -> PathBuf {
        self.resolve(&self.output.state_dir)
    }

    pub fn report_path(&self) -> PathBuf {
        match &self.output.report {
            Some(p) => self.resolve(p),
            None => self.state_dir().join("report.json"),
        }
    }

    /// Training settings with the pipeline seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.config.clone()
        }
    }

    /// Oracle spec with fixture paths resolved.
    pub fn oracle_spec(&self) -> OracleSpec {
        match &self.oracle {
            OracleSpec::Mock { fixture, rules } => OracleSpec::Mock {
                fixture: fixture.as_deref().map(|p| self.resolve(p)),
                rules: rules.clone(),
            },
            other => other.clone(),
        }
    }

    /// Applies flags, then environment variables for anything the flags left
    /// unset. Returns one human-readable line per applied override.
    pub fn apply_overrides(
        &mut self,
        flags: &Overrides,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Vec<String>> {
        let mut log = Vec::new();
        let pick = |flag: Option<String>, var: &str| -> Option<(String, String)> {
            match flag {
                Some(v) => Some((v, "flag".to_string())),
                None => env(var).filter(|v| !v.is_empty()).map(|v| (v, format!("env {var}"))),
            }
        };

        if let Some((v, src)) = pick(flags.state_dir.as_ref().map(|p| p.display().to_string()), ENV_STATE_DIR) {
            log.push(format!("output.state_dir={v} ({src})"));
            self.output.state_dir = PathBuf::from(v);
        }
        if let Some((v, src)) = pick(flags.seed.map(|s| s.to_string()), ENV_SEED) {
            self.seed = v
                .parse()
                .map_err(|_| Error::Config(format!("{src}: seed must be an unsigned integer, got {v:?}")))?;
            log.push(format!("seed={v} ({src})"));
        }

        if let Some(mock) = &flags.mock_oracle {
            let spec = match (mock, &self.oracle) {
                (Some(path), _) => OracleSpec::Mock {
                    fixture: Some(path.clone()),
                    rules: None,
                },
                (None, current @ OracleSpec::Mock { .. }) => current.clone(),
                (None, _) => OracleSpec::mock(MockRules::default()),
            };
            let shown = mock.as_ref().map_or_else(|| "default".to_string(), |p| p.display().to_string());
            log.push(format!("oracle=mock:{shown} (flag)"));
            self.oracle = spec;
        }

        let endpoint = pick(flags.llm_endpoint.clone(), ENV_LLM_ENDPOINT);
        let model = pick(flags.llm_model.clone(), ENV_LLM_MODEL);
        // The mock flag wins over any endpoint from the environment.
        let endpoint = endpoint.filter(|(_, src)| src == "flag" || flags.mock_oracle.is_none());
        let model = model.filter(|(_, src)| src == "flag" || flags.mock_oracle.is_none());
        if endpoint.is_some() || model.is_some() || flags.llm_timeout.is_some() {
            if flags.mock_oracle.is_some() && (endpoint.is_some() || model.is_some()) {
                return Err(Error::Config("--mock-oracle conflicts with --llm-endpoint/--llm-model".into()));
            }
            match &mut self.oracle {
                OracleSpec::Remote {
                    endpoint: e,
                    model: m,
                    timeout_secs,
                    ..
                } => {
                    if let Some((v, src)) = &endpoint {
                        log.push(format!("oracle.endpoint={v} ({src})"));
                        *e = v.clone();
                    }
                    if let Some((v, src)) = &model {
                        log.push(format!("oracle.model={v} ({src})"));
                        *m = v.clone();
                    }
                    if let Some(t) = flags.llm_timeout {
                        log.push(format!("oracle.timeout_secs={t} (flag)"));
                        *timeout_secs = t;
                    }
                }
                OracleSpec::Mock { .. } => {
                    let (Some((e, esrc)), Some((m, msrc))) = (endpoint, model) else {
                        if flags.mock_oracle.is_some() {
                            // Only a timeout arrived; it has nothing to apply to.
                            return Ok(log);
                        }
                        return Err(Error::Validation(vec![violation(
                            "oracle",
                            "switching from the mock to a remote oracle needs both an endpoint and a model",
                        )]));
                    };
                    log.push(format!("oracle.endpoint={e} ({esrc})"));
                    log.push(format!("oracle.model={m} ({msrc})"));
                    let timeout = flags.llm_timeout.unwrap_or(60.0);
                    if flags.llm_timeout.is_some() {
                        log.push(format!("oracle.timeout_secs={timeout} (flag)"));
                    }
                    self.oracle = OracleSpec::Remote {
                        endpoint: e,
                        model: m,
                        temperature: 0.0,
                        max_retries: 3,
                        timeout_secs: timeout,
                        max_in_flight: 4,
                    };
                }
            }
        }
        Ok(log)
    }

    /// Every violated constraint, each with its field path.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        self.dataset_violations(&mut out);

        match &self.encoder.backbone {
            BackboneSpec::HashNgram {
                ngram_min,
                ngram_max,
                dim,
                ..
            } => {
                if *dim == 0 {
                    out.push(violation("encoder.backbone.dim", "must be at least 1"));
                }
                if *ngram_min == 0 || ngram_min > ngram_max {
                    out.push(violation(
                        "encoder.backbone.ngram_min",
                        format!("need 1 <= ngram_min <= ngram_max, got {ngram_min}..{ngram_max}"),
                    ));
                }
            }
            BackboneSpec::Remote {
                endpoint,
                dim,
                timeout_secs,
                max_in_flight,
                ..
            } => {
                if endpoint.is_empty() {
                    out.push(violation("encoder.backbone.endpoint", "must not be empty"));
                }
                if *dim == 0 {
                    out.push(violation("encoder.backbone.dim", "must be at least 1"));
                }
                if !(*timeout_secs > 0.0) {
                    out.push(violation("encoder.backbone.timeout_secs", "must be positive"));
                }
                if *max_in_flight == 0 {
                    out.push(violation("encoder.backbone.max_in_flight", "must be at least 1"));
                }
            }
        }

        match &self.oracle {
            OracleSpec::Remote {
                endpoint,
                model,
                temperature,
                timeout_secs,
                max_in_flight,
                ..
            } => {
                if endpoint.is_empty() {
                    out.push(violation("oracle.endpoint", "must not be empty"));
                }
                if model.is_empty() {
                    out.push(violation("oracle.model", "must not be empty"));
                }
                if !(*temperature >= 0.0 && temperature.is_finite()) {
                    out.push(violation("oracle.temperature", "must be finite and >= 0"));
                }
                if !(*timeout_secs > 0.0) {
                    out.push(violation("oracle.timeout_secs", "must be positive"));
                }
                if *max_in_flight == 0 {
                    out.push(violation("oracle.max_in_flight", "must be at least 1"));
                }
            }
            OracleSpec::Mock { fixture, rules } => match (fixture, rules) {
                (Some(_), Some(_)) => out.push(violation("oracle", "give either `fixture` or `rules`, not both")),
                (None, None) => out.push(violation("oracle", "mock oracle needs `rules` or `fixture`")),
                (Some(p), None) => {
                    let p = self.resolve(p);
                    if !p.exists() {
                        out.push(violation("oracle.fixture", format!("{} does not exist", p.display())));
                    } else if let Err(e) = MockRules::load(&p) {
                        out.push(violation("oracle.fixture", e.to_string()));
                    }
                }
                (None, Some(r)) => {
                    if let Err(e) = r.validate() {
                        out.push(violation("oracle.rules", e.to_string()));
                    }
                }
            },
        }

        let lambda = self.retrieve.mmr_lambda;
        if !(0.0..=1.0).contains(&lambda) {
            out.push(violation("retrieve.mmr_lambda", format!("must lie in [0, 1], got {lambda}")));
        }
        if self.delta.k_candidates == 0 {
            out.push(violation("delta.k_candidates", "must be at least 1"));
        }
        if self.delta.checkpoint_every == 0 {
            out.push(violation("delta.checkpoint_every", "must be at least 1"));
        }
        out.extend(self.train.config.violations("train"));
        out.extend(self.train.weights.violations("train.weights"));
        out.extend(self.infer.violations("infer"));
        if self.output.state_dir.as_os_str().is_empty() {
            out.push(violation("output.state_dir", "must not be empty"));
        }
        out
    }

    fn dataset_violations(&self, out: &mut Vec<Violation>) {
        let exists = |out: &mut Vec<Violation>, path: String, p: &Path| {
            let p = self.resolve(p);
            if !p.exists() {
                out.push(violation(path, format!("{} does not exist", p.display())));
            }
        };
        match &self.dataset {
            DatasetConfig::Jsonl { train, test } => {
                exists(out, "dataset.train".into(), train);
                exists(out, "dataset.test".into(), test);
            }
            DatasetConfig::Synthetic { spec } => {
                let pairs = [
                    ("source_train", spec.source_train, spec.source_train_anomalies),
                    ("target_train", spec.target_train, spec.target_train_anomalies),
                    ("target_test", spec.target_test, spec.target_test_anomalies),
                ];
                for (name, total, anomalies) in pairs {
                    if anomalies > total {
                        out.push(violation(
                            format!("dataset.spec.{name}_anomalies"),
                            format!("{anomalies} anomalies exceed {total} sequences"),
                        ));
                    }
                }
                if spec.window == 0 {
                    out.push(violation("dataset.spec.window", "must be at least 1"));
                }
                if spec.source_train + spec.target_train < 2 {
                    out.push(violation("dataset.spec", "needs at least 2 training sequences"));
                }
                if spec.target_test == 0 {
                    out.push(violation("dataset.spec.target_test", "must be at least 1"));
                }
            }
            DatasetConfig::Raw { sources } => {
                if sources.is_empty() {
                    out.push(violation("dataset.sources", "needs at least one source"));
                }
                for (i, src) in sources.iter().enumerate() {
                    let at = |field: &str| format!("dataset.sources[{i}].{field}");
                    if src.domain.is_empty() {
                        out.push(violation(at("domain"), "must not be empty"));
                    }
                    exists(out, at("path"), &src.path);
                    match src.effective_grouping() {
                        None => out.push(violation(at("grouping"), "set `grouping` or a `preset`")),
                        Some(Grouping::Window { window_size: 0, .. }) => {
                            out.push(violation(at("grouping.window_size"), "must be at least 1"))
                        }
                        Some(Grouping::Session { key_pattern }) => match Regex::new(&key_pattern) {
                            Ok(re) if re.captures_len() >= 2 => {}
                            Ok(_) => out.push(violation(at("grouping.key_pattern"), "needs a capture group")),
                            Err(e) => out.push(violation(at("grouping.key_pattern"), e.to_string())),
                        },
                        Some(Grouping::Window { .. }) => {}
                    }
                    if let LabelConvention::SessionFile { path } = src.effective_labels() {
                        exists(out, at("labels.path"), &path);
                    }
                    for (r, rule) in src.rules.iter().enumerate() {
                        if let Err(e) = Regex::new(&rule.pattern) {
                            out.push(violation(format!("dataset.sources[{i}].rules[{r}].pattern"), e.to_string()));
                        }
                    }
                    if src.train_count + src.test_count == 0 {
                        out.push(violation(at("train_count"), "train_count + test_count must be positive"));
                    }
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// Parses and checks a config file. Parse failures are errors; constraint
/// failures come back as the list of violations.
pub fn validate_config(path: &Path) -> Result<Vec<Violation>> {
    Ok(PipelineConfig::load(path)?.violations())
}
