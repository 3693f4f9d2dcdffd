//! Command-line driver for the `refertok` pipeline.
//!
//! Exit codes: 0 success, 1 I/O or usage, 2 malformed input, 3 pipeline failure.

pub mod commands;
pub mod objects;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use refertok::config::RunConfig;
use refertok::infusion::Framework;
use refertok::ErrorClass;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] refertok::Error),
    #[error("{stem}: {source}")]
    Job {
        stem: String,
        source: refertok::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) | CliError::Job { source: e, .. } => match e.class() {
                ErrorClass::Io => 1,
                ErrorClass::Format => 2,
                ErrorClass::Pipeline => 3,
            },
        }
    }

    pub fn in_job(stem: &str, source: refertok::Error) -> Self {
        CliError::Job {
            stem: stem.to_string(),
            source,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "refertok",
    version,
    about = "Object tokens for referring multimodal models"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overrides the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for every output file
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads (0 = one per core)
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Sequence layout for `assemble`; row filter for `budget`
    #[arg(long, global = true, value_enum)]
    pub framework: Option<FrameworkArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameworkArg {
    VisionObject,
    ObjectOnly,
}

impl From<FrameworkArg> for Framework {
    fn from(f: FrameworkArg) -> Self {
        match f {
            FrameworkArg::VisionObject => Framework::VisionObject,
            FrameworkArg::ObjectOnly => Framework::ObjectOnly,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn object masks into n object tokens each
    Tokenize(commands::tokenize::TokenizeArgs),
    /// Run local and global context infusion on token archives
    Infuse(commands::infuse::InfuseArgs),
    /// Lay out the language-model input sequence
    Assemble(commands::assemble::AssembleArgs),
    /// Analytical FLOPs of both frameworks
    Budget(commands::budget::BudgetArgs),
    /// Pairwise cosine similarity before and after aggregation
    Simstats(commands::simstats::SimstatsArgs),
}

/// Resolved global state shared by the subcommands.
pub struct Context {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub framework: Option<Framework>,
}

impl Context {
    pub fn from_args(g: &GlobalArgs) -> CliResult<Self> {
        let mut config = match &g.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = g.seed {
            config.seed = s;
        }
        if let Some(w) = g.workers {
            config.workers = w;
        }
        Ok(Self {
            config,
            out_dir: g.out_dir.clone(),
            framework: g.framework.map(Into::into),
        })
    }

    pub fn output(&self, name: &str) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        Ok(self.out_dir.join(name))
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let ctx = Context::from_args(&cli.global)?;
    let workers = ctx.config.workers;
    refertok::par::with_workers(workers, move || match cli.command {
        Command::Tokenize(a) => commands::tokenize::run(&ctx, a),
        Command::Infuse(a) => commands::infuse::run(&ctx, a),
        Command::Assemble(a) => commands::assemble::run(&ctx, a),
        Command::Budget(a) => commands::budget::run(&ctx, a),
        Command::Simstats(a) => commands::simstats::run(&ctx, a),
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)?;
    Ok(())
}
