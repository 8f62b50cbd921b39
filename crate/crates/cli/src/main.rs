mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use craft_core::data::{Domain, TaskKind};
use craft_core::pruner::Selection;
use thiserror::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  all requested outputs were written
  1  runtime failure
  2  usage error (bad flag, flag value or CRAFT_SEED)
  3  malformed or corrupted input file (dataset, codebook, checkpoint, stats, config)
  4  codebook CRC mismatch between artifacts

Config precedence: built-in defaults < --config file < CRAFT_SEED < flags.";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("codebook CRC mismatch for {what}: expected {expected:08x}, found {found:08x}")]
    Crc { expected: u32, found: u32, what: String },
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Parser)]
#[command(name = "craft", version, about = "Codebook-regularized encoder adaptation and rarity-weighted token pruning")]
#[command(after_help = EXIT_CODES)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; missing keys keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config file and CRAFT_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Classification,
    AttributeVqa,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => TaskKind::Classification,
            TaskArg::AttributeVqa => TaskKind::AttributeVqa,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DomainArg {
    Generic,
    Specialist,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Generic => Domain::Generic,
            DomainArg::Specialist => Domain::Specialist,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ArchArg {
    A,
    B,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelectionArg {
    Full,
    QuotaResidual,
    QuotaRandom,
    Random,
}

impl From<SelectionArg> for Selection {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::Full => Selection::Full,
            SelectionArg::QuotaResidual => Selection::QuotaResidual,
            SelectionArg::QuotaRandom => Selection::QuotaRandom,
            SelectionArg::Random => Selection::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblationArg {
    /// Full objective and each single loss-term removal.
    Loss,
    /// Backbone A re-aligned to subsampled codebooks.
    Codebook,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train and test splits) as JSONL.
    #[command(after_help = EXIT_CODES)]
    GenData(GenData),
    /// Fit a residual codebook on the train-split features of datasets.
    #[command(after_help = EXIT_CODES)]
    FitCodebook(FitCodebook),
    /// Count first-level token IDs over a dataset's train split.
    #[command(after_help = EXIT_CODES)]
    FreqStats(FreqStats),
    /// Align a surrogate backbone to a codebook (projector, then projector and LM).
    #[command(after_help = EXIT_CODES)]
    Pretrain(Pretrain),
    /// Adapt the patch encoder against a frozen backbone and codebook.
    #[command(after_help = EXIT_CODES)]
    Adapt(Adapt),
    /// Dump the pruning decision for one sample.
    #[command(after_help = EXIT_CODES)]
    Prune(Prune),
    /// Exact-match accuracy and FLOPs of one encoder on one backbone.
    #[command(after_help = EXIT_CODES)]
    Eval(Eval),
    /// Accuracy and FLOPs of adapted encoders across keep ratios.
    #[command(after_help = EXIT_CODES)]
    Sweep(Sweep),
    /// Zero-shot and adapted encoders against every backbone.
    #[command(after_help = EXIT_CODES)]
    Transfer(Transfer),
    /// Loss-term or codebook-size ablation.
    #[command(after_help = EXIT_CODES)]
    Ablate(Ablate),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, value_enum, default_value = "specialist")]
    pub domain: DomainArg,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitCodebook {
    /// Dataset JSONL files; repeat for several.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub entries: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FreqStats {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    /// Adapted encoder checkpoint; the identity encoder if absent.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Pretrain {
    /// Generic-domain dataset JSONL.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long, value_enum, default_value = "a")]
    pub arch: ArchArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Adapt {
    /// Specialist dataset JSONL.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    /// Encoder checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Drop the answer-likelihood term.
    #[arg(long)]
    pub no_sal: bool,
    /// Drop the contrastive term.
    #[arg(long)]
    pub no_con: bool,
    /// Drop the commitment term.
    #[arg(long)]
    pub no_commit: bool,
}

#[derive(Debug, Args)]
pub struct Prune {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Fraction of tokens to keep; the config value if absent.
    #[arg(long, conflicts_with = "tokens")]
    pub keep_ratio: Option<f64>,
    /// Absolute token budget.
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long, value_enum, default_value = "full")]
    pub selection: SelectionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    /// Adapted encoder checkpoint; the identity encoder (zero-shot) if absent.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Frequency statistics; estimated from the train split if absent.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Fraction of visual tokens kept; the config value if absent.
    #[arg(long)]
    pub keep_ratio: Option<f64>,
    /// Report JSON; a CSV is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Stored artifacts that replace the built-in world's fitting and pretraining.
#[derive(Debug, Args)]
pub struct WorldArgs {
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Backbone checkpoints, A first; both are pretrained if none are given.
    #[arg(long, requires = "codebook")]
    pub backbone: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.9,0.8,0.7,0.6,0.5")]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Transfer {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub keep_ratio: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, value_enum, default_value = "loss")]
    pub kind: AblationArg,
    /// Codebook fractions for the codebook ablation.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,1.0")]
    pub fractions: Vec<f64>,
    /// Task for the codebook ablation.
    #[arg(long, value_enum, default_value = "attribute-vqa")]
    pub task: TaskArg,
    #[arg(long)]
    pub keep_ratio: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use craft_core::codebook::CodebookError;
    use craft_core::model::CheckpointError;
    use craft_core::pruner::PruneError;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => 2,
                CliError::Format(_) => 3,
                CliError::Crc { .. } => 4,
                CliError::Input(_) => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<craft_core::Error>() {
            if matches!(e, craft_core::Error::CrcMismatch { .. }) {
                return 4;
            }
            if e.is_format() {
                return 3;
            }
        }
        if matches!(cause.downcast_ref::<CodebookError>(), Some(CodebookError::Format(_)))
            || matches!(cause.downcast_ref::<CheckpointError>(), Some(CheckpointError::Format(_)))
            || matches!(cause.downcast_ref::<PruneError>(), Some(PruneError::Format(_)))
        {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = config::RunConfig::resolve(cli.global.config.as_deref(), cli.global.seed)
        .map_err(anyhow::Error::from)
        .and_then(|cfg| match cli.command {
            Command::GenData(a) => commands::gen_data(&cfg, &a),
            Command::FitCodebook(a) => commands::fit_codebook(&cfg, &a),
            Command::FreqStats(a) => commands::freq_stats(&cfg, &a),
            Command::Pretrain(a) => commands::pretrain(&cfg, &a),
            Command::Adapt(a) => commands::adapt(&cfg, &a),
            Command::Prune(a) => commands::prune(&cfg, &a),
            Command::Eval(a) => commands::eval(&cfg, &a),
            Command::Sweep(a) => commands::sweep(cfg, &a),
            Command::Transfer(a) => commands::transfer(cfg, &a),
            Command::Ablate(a) => commands::ablate(cfg, &a),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
