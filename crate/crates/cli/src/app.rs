use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{parse_config, Format, RunConfig};
use crate::error::{CliError, Result};
use crate::experiments::{self, Context, ExperimentKind};
use crate::lock::OutputLock;
use crate::report::Output;

#[derive(Debug, Parser)]
#[command(name = "gradcal", version, about = "Train and calibrate classifiers with gradient-weighted losses")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Run a single seed instead of the configured ones.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (overrides `[run] out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Report formats to write; repeat or comma-separate.
    #[arg(long, global = true, value_enum, value_delimiter = ',')]
    pub format: Vec<Format>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured loss on every seed, fit T and save checkpoints.
    Train {
        /// Continue from this checkpoint (single seed only).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Test-set metrics of saved checkpoints at T = 1.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit T on the validation split of saved checkpoints.
    Calibrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one experiment kind.
    Experiment {
        /// train-eval, toy-correlation, grad-factor, grad-vs-brier,
        /// ece-over-epochs, fixed-point or weight-ablation
        kind: String,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(files) => {
            let mut stdout = std::io::stdout().lock();
            for f in files {
                let _ = writeln!(stdout, "{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("gradcal: {e}");
            e.exit_code()
        }
    }
}

pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.run.seed = Some(seed);
        config.run.seeds.clear();
    }
    if let Some(out) = &cli.out {
        config.run.out = out.clone();
    }
    if !cli.format.is_empty() {
        config.run.formats = cli.format.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Runs the command and returns the files it wrote.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let kind = match &cli.command {
        Command::Experiment { kind } => Some(kind.parse::<ExperimentKind>()?),
        _ => None,
    };
    let config = effective_config(cli)?;
    let out_dir = config.run.out.clone();
    let _lock = OutputLock::acquire(&out_dir)?;
    let resume = match &cli.command {
        Command::Train { resume } => resume.clone(),
        Command::Eval { checkpoint } | Command::Calibrate { checkpoint } => checkpoint.clone(),
        Command::Experiment { .. } => None,
    };
    if resume.is_some() && config.seeds().len() != 1 {
        return Err(CliError::Usage("a checkpoint path needs exactly one seed (use --seed)".into()));
    }
    let ctx = Context { config: &config, seeds: config.seeds(), out: out_dir.clone(), resume };
    let output: Output = match (&cli.command, kind) {
        (Command::Train { .. }, _) => experiments::train_eval(&ctx, "train")?,
        (Command::Eval { .. }, _) => experiments::eval(&ctx)?,
        (Command::Calibrate { .. }, _) => experiments::calibrate(&ctx)?,
        (Command::Experiment { .. }, Some(kind)) => experiments::run_experiment(kind, &ctx)?,
        (Command::Experiment { .. }, None) => unreachable!("kind parsed above"),
    };
    output.write(&out_dir, &config.run.formats)
}
