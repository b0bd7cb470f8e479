use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cleo::experiment::{cmd_generate, cmd_presets, cmd_report, cmd_run, ExperimentConfig};
use cleo::learner::Method;
use cleo::par::{with_threads, Execution};
use cleo::{Error, Result};

/// Continual learning of evolving ontologies on synthetic segmentation data.
#[derive(Parser)]
#[command(name = "cleo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the shipped task sequences with task counts and class groups.
    Presets,
    /// Generate a synthetic dataset into --out.
    Generate(ExperimentArgs),
    /// Train one method and write checkpoints and reports into --out.
    Run(ExperimentArgs),
    /// Merge the summaries of finished runs into one comparison table.
    Report {
        /// Run directories, one row each.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Task sequence JSON file, instead of a preset.
    #[arg(long)]
    sequence: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory written by `generate` (run only).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ExperimentArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let (mut cfg, mut explicit_epochs) = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => (ExperimentConfig::default(), false),
        };
        if self.preset.is_some() || self.sequence.is_some() {
            cfg.preset = self.preset;
            cfg.sequence = self.sequence;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = self.out {
            cfg.out = Some(o);
        }
        if let Some(d) = self.data {
            cfg.data = Some(d);
        }
        if let Some(l) = self.lambda {
            cfg.train.lambda = l;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
            explicit_epochs = true;
        }
        if !explicit_epochs {
            cfg.use_preset_epochs();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn threads() -> Result<Option<usize>> {
    match std::env::var("CLEO_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("CLEO_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let exec = Execution::Parallel;
    match cli.command {
        Command::Presets => cmd_presets(std::io::stdout().lock()),
        Command::Generate(args) => {
            let cfg = args.resolve()?;
            let receipt = with_threads(threads()?, || cmd_generate(&cfg, exec))?;
            println!("wrote {} files for seed {}", receipt.files.len(), receipt.seed);
            Ok(())
        }
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let s = with_threads(threads()?, || cmd_run(&cfg, exec))?;
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!(
                "{} on {}: unsplit {} split {} retained {} all {}",
                s.method,
                s.sequence,
                cell(s.unsplit),
                cell(s.split),
                cell(s.retained),
                cell(s.all)
            );
            Ok(())
        }
        Command::Report { runs, out } => match out {
            Some(path) => {
                let mut buf = Vec::new();
                cmd_report(&runs, &mut buf)?;
                std::fs::write(&path, buf).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            }
            None => cmd_report(&runs, std::io::stdout().lock()),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
