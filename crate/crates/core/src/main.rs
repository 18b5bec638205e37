use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use qlrnn::cli::{self, exit_code};
use qlrnn::config::RunConfig;
use qlrnn::data::Example;
use qlrnn::{Error, Result};

#[derive(Parser)]
#[command(name = "qlrnn", version, about = "Gated recurrent sequence models with block skips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `data_path` (and selects the jsonl source).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (train) or output file (other commands).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, logs and report.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which part of the configured data to evaluate.
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Print per-tensor and total parameter counts.
    Params(Common),
    /// Print the gradient-flow profile as CSV.
    Gradflow(Common),
    /// Time each configured architecture and print op counts.
    Bench(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = &c.data {
        cfg.data.source = qlrnn::config::SourceKind::Jsonl;
        cfg.data.path = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a report-producing command into stdout, and also into `--out` if given.
fn with_output(out: &Option<PathBuf>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    let result = f(&mut buf);
    io::stdout().write_all(&buf)?;
    result?;
    if let Some(path) = out {
        std::fs::write(path, &buf)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let dir = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            cli::cmd_train(&cfg, &dir, &mut io::stdout())?;
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = load_config(&common)?;
            let (train, val) = cli::load_dataset(&cfg)?;
            let examples: Vec<Example> = match split {
                Split::Train => train,
                Split::Val => val,
                Split::All => train.into_iter().chain(val).collect(),
            };
            with_output(&common.out, |w| {
                cli::cmd_eval(&checkpoint, &examples, cfg.train.max_len, w).map(drop)
            })?;
        }
        Command::Params(c) => {
            let cfg = load_config(&c)?;
            with_output(&c.out, |w| cli::cmd_params(&cfg.model, w).map(drop))?;
        }
        Command::Gradflow(c) => {
            let cfg = load_config(&c)?;
            with_output(&c.out, |w| cli::cmd_gradflow(&cfg, w).map(drop))?;
        }
        Command::Bench(c) => {
            let cfg = load_config(&c)?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build_global()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            with_output(&c.out, |w| cli::cmd_bench(&cfg, w).map(drop))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
