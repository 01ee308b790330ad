//! Command-line entry point for the phmn toolkit.
//!
//! Exit codes: 0 success (or outputs already up to date), 1 runtime
//! failure, 2 usage or configuration error, 3 missing input, 4 existing
//! output or checkpoint that does not match the requested run.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the directory relative paths are resolved against.
pub const DATA_ROOT_ENV: &str = "PHMN_DATA_ROOT";
/// Environment variable holding the log filter (default `info`).
pub const LOG_ENV: &str = "PHMN_LOG";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config { key: String, msg: String },
    Missing(PathBuf),
    Conflict(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) | Failure::Config { .. } => 2,
            Failure::Missing(_) => 3,
            Failure::Conflict(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Config { key, msg } => write!(f, "invalid configuration key `{key}`: {msg}"),
            Failure::Missing(p) => write!(f, "missing input: {}", p.display()),
            Failure::Conflict(m) => write!(f, "{m}"),
            Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "phmn",
    version,
    about = "Personalized hybrid matching networks for multi-turn response selection",
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads for scoring and gradient computation (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build train/valid/test splits with sampled negatives from raw sessions.
    BuildCorpus(BuildCorpusArgs),
    /// Build per-user n-gram tf-idf statistics from encoded histories.
    BuildTfidf(BuildTfidfArgs),
    /// Train one model variant with early stopping on validation R10@1.
    Train(TrainArgs),
    /// Score a split with a checkpoint and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Score the candidates of one case and print them best first.
    Rank(RankArgs),
    /// Train and evaluate a grid of variants or fusion settings.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct BuildCorpusArgs {
    /// Sessions as JSON lines: {"session_id", "turns": [{"user", "text"}]}.
    #[arg(long)]
    sessions: PathBuf,
    /// Run file whose [corpus] section supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    min_utts: Option<usize>,
    #[arg(long)]
    min_turns: Option<usize>,
    #[arg(long)]
    max_turns: Option<usize>,
    #[arg(long)]
    history_cap: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    vocab_cap: Option<usize>,
    #[arg(long)]
    neg_train: Option<usize>,
    #[arg(long)]
    neg_eval: Option<usize>,
    #[arg(long)]
    valid_frac: Option<f64>,
    #[arg(long)]
    test_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite outputs built from different inputs.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct BuildTfidfArgs {
    /// `histories.jsonl` of a corpus directory.
    #[arg(long)]
    histories: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainSettings {
    /// Corpus directory written by build-corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Tf-idf directory written by build-tfidf; needed by masked variants.
    #[arg(long)]
    tfidf: Option<PathBuf>,
    /// Run file with [model] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only the N most recent history utterances per responder.
    #[arg(long, value_name = "N")]
    history_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    max_epochs: Option<u64>,
    /// Disable global-norm gradient clipping.
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// PHMN, HMN, PMN, HMN_W or HMN_Att.
    #[arg(long)]
    variant: Option<String>,
    /// Continue from `state.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    settings: TrainSettings,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory holding the split to score.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    tfidf: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-group candidate scores as JSON lines.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct RankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON case: {"context": [..], "candidates": [..], "responder_id", "responder_history"?}.
    #[arg(long)]
    case: PathBuf,
    /// Corpus directory for the vocabulary and stored histories.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    tfidf: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Comma-separated variants, one row each (Table 2 layout). Without it
    /// the gate and auxiliary-loss grid of `--variant` is run.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Fused variant for the gate/auxiliary-loss grid.
    #[arg(long, default_value = "PHMN")]
    variant: String,
    #[command(flatten)]
    settings: TrainSettings,
}

/// Parse `argv` (program name first) and run the subcommand; returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            log::error!("{f}");
            f.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| match cli.command {
        Command::BuildCorpus(a) => commands::build_corpus(a),
        Command::BuildTfidf(a) => commands::build_tfidf(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Rank(a) => commands::rank(a),
        Command::Ablate(a) => commands::ablate(a),
    })
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, rec| {
            writeln!(
                buf,
                "ts={} level={} target={} msg={:?}",
                buf.timestamp_millis(),
                rec.level().as_str().to_lowercase(),
                rec.target(),
                rec.args().to_string()
            )
        })
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// `p` itself if absolute or no data root is set, else `$PHMN_DATA_ROOT/p`.
pub fn resolve(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn require(p: &Path) -> Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Missing(p.to_path_buf()))
    }
}

pub(crate) fn read_to_string(p: &Path) -> Result<String, Failure> {
    require(p)?;
    Ok(std::fs::read_to_string(p)?)
}

pub(crate) fn read_bytes(p: &Path) -> Result<Vec<u8>, Failure> {
    require(p)?;
    Ok(std::fs::read(p)?)
}
