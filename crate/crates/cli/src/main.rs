use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use logicl_core::config::{validate_config, Overrides, PipelineConfig};
use logicl_core::pipeline::{Pipeline, Stage};
use logicl_core::{Error, Result};

/// Cross-domain log anomaly detection with reasoning-aware demonstration retrieval.
#[derive(Parser, Debug)]
#[command(name = "logicl", version)]
struct Cli {
    /// Pipeline config, TOML or JSON.
    #[arg(long, short, global = true, env = "LOGICL_CONFIG")]
    config: Option<PathBuf>,

    /// State directory; overrides output.state_dir and $LOGICL_STATE_DIR.
    #[arg(long, global = true)]
    state_dir: Option<PathBuf>,

    /// Overrides the config seed and $LOGICL_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// OpenAI-compatible base URL; overrides $LOGICL_LLM_ENDPOINT.
    #[arg(long, global = true)]
    llm_endpoint: Option<String>,

    /// Model name sent to the endpoint; overrides $LOGICL_LLM_MODEL.
    #[arg(long, global = true)]
    llm_model: Option<String>,

    /// Per-request timeout in seconds.
    #[arg(long, global = true)]
    llm_timeout: Option<f64>,

    /// Use the offline keyword oracle, optionally with rules from a JSON file.
    #[arg(long, global = true, num_args = 0..=1, value_name = "RULES")]
    mock_oracle: Option<Option<PathBuf>>,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, group and split the dataset.
    Prepare,
    /// Embed both splits with the frozen backbone.
    Embed,
    /// Score demonstrations against the oracle into the delta matrix.
    BuildDelta(DeltaFlags),
    /// Train the projection head.
    Train,
    /// Predict every test sequence.
    Detect(DetectFlags),
    /// Compute metrics, write the report and alignment exports.
    Eval,
    /// Run every stage in order.
    All {
        #[command(flatten)]
        delta: DeltaFlags,
        #[command(flatten)]
        detect: DetectFlags,
    },
    /// Print the demonstrations chosen for one prepared sequence as JSON.
    Retrieve {
        /// Sequence id from the prepared train or test split.
        #[arg(long)]
        id: String,
        #[command(flatten)]
        detect: DetectFlags,
    },
    /// Check the config and list every violation.
    Validate,
}

#[derive(Args, Debug, Default)]
struct DeltaFlags {
    /// MMR candidates scored per query.
    #[arg(long)]
    k_candidates: Option<usize>,
    /// Queries between checkpoint writes.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Start over instead of resuming an interrupted build.
    #[arg(long)]
    no_resume: bool,
}

#[derive(Args, Debug, Default)]
struct DetectFlags {
    /// Similarity anchors per prompt.
    #[arg(long)]
    top_i: Option<usize>,
    /// Delta-guided expansions per prompt.
    #[arg(long)]
    top_j: Option<usize>,
    /// Decision threshold in (0, 1).
    #[arg(long)]
    threshold: Option<f64>,
    /// Ask the oracle for its reasoning.
    #[arg(long)]
    cot: bool,
    /// Count failed predictions as normal instead of excluding them.
    #[arg(long)]
    failed_as_normal: bool,
}

impl DeltaFlags {
    fn apply(&self, cfg: &mut PipelineConfig, log: &mut Vec<String>) {
        if let Some(k) = self.k_candidates {
            cfg.delta.k_candidates = k;
            log.push(format!("delta.k_candidates={k} (flag)"));
        }
        if let Some(n) = self.checkpoint_every {
            cfg.delta.checkpoint_every = n;
            log.push(format!("delta.checkpoint_every={n} (flag)"));
        }
        if self.no_resume {
            cfg.delta.resume = false;
            log.push("delta.resume=false (flag)".into());
        }
    }
}

impl DetectFlags {
    fn apply(&self, cfg: &mut PipelineConfig, log: &mut Vec<String>) {
        if let Some(i) = self.top_i {
            cfg.infer.top_i = i;
            log.push(format!("infer.top_i={i} (flag)"));
        }
        if let Some(j) = self.top_j {
            cfg.infer.top_j = j;
            log.push(format!("infer.top_j={j} (flag)"));
        }
        if let Some(t) = self.threshold {
            cfg.infer.threshold = t;
            log.push(format!("infer.threshold={t} (flag)"));
        }
        if self.cot {
            cfg.infer.cot_enabled = true;
            log.push("infer.cot_enabled=true (flag)".into());
        }
        if self.failed_as_normal {
            cfg.infer.failed_as_normal = true;
            log.push("infer.failed_as_normal=true (flag)".into());
        }
    }
}

/// Prints a line; a closed pipe (`| head`) is not an error.
fn out(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| Error::Config("no config given; pass --config or set LOGICL_CONFIG".into()))?;

    if let Command::Validate = cli.command {
        let violations = validate_config(&config_path)?;
        if violations.is_empty() {
            out(&format!("{}: ok", config_path.display()));
            return Ok(());
        }
        return Err(Error::Validation(violations));
    }

    let bytes = std::fs::read(&config_path).map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
    let mut cfg = PipelineConfig::load(&config_path)?;
    let flags = Overrides {
        state_dir: cli.state_dir.clone(),
        seed: cli.seed,
        llm_endpoint: cli.llm_endpoint.clone(),
        llm_model: cli.llm_model.clone(),
        llm_timeout: cli.llm_timeout,
        mock_oracle: cli.mock_oracle.clone(),
    };
    let env = |k: &str| std::env::var(k).ok();
    let mut log = cfg.apply_overrides(&flags, &env)?;
    // A relative --state-dir is relative to where the command runs.
    if let Some(dir) = &cli.state_dir {
        if dir.is_relative() {
            cfg.output.state_dir = std::env::current_dir()
                .map_err(|e| Error::Config(format!("current directory: {e}")))?
                .join(dir);
        }
    }

    let stage = match &cli.command {
        Command::Prepare => Stage::Prepare,
        Command::Embed => Stage::Embed,
        Command::BuildDelta(d) => {
            d.apply(&mut cfg, &mut log);
            Stage::BuildDelta
        }
        Command::Train => Stage::Train,
        Command::Detect(d) => {
            d.apply(&mut cfg, &mut log);
            Stage::Detect
        }
        Command::Eval => Stage::Eval,
        Command::All { delta, detect } => {
            delta.apply(&mut cfg, &mut log);
            detect.apply(&mut cfg, &mut log);
            Stage::All
        }
        Command::Retrieve { id, detect } => {
            detect.apply(&mut cfg, &mut log);
            let pipeline = Pipeline::new(cfg, &bytes, log)?;
            let selection = pipeline.retrieve(id)?;
            out(&serde_json::to_string_pretty(&selection)?);
            return Ok(());
        }
        Command::Validate => unreachable!(),
    };
    for line in &log {
        log::info!("override: {line}");
    }
    let pipeline = Pipeline::new(cfg, &bytes, log)?;
    let status = pipeline.run_stage(stage)?;
    log::info!("{stage}: {status:?}");
    if matches!(stage, Stage::Eval | Stage::All) {
        out(&format!("report: {}", pipeline.config().report_path().display()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
