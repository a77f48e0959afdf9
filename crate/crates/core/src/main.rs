use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use rlvc::harness::{Experiment, ExperimentConfig};
use rlvc::rlvc_loop::RlvcModel;

#[derive(Parser)]
#[command(name = "rlvc", version, about = "Learn perceptual state spaces from image percepts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Seeds every random choice of the run.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Run RLVC; writes trace.csv and model.txt into the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, short, default_value = "out")]
        out: PathBuf,
        /// Also write the database as interactions.csv and percepts.txt.
        #[arg(long)]
        database: bool,
    },
    /// Evaluate a model checkpoint; prints the report CSV unless --out is given.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Solve the task on a grid of true states; writes baseline_report.csv
    /// and baseline_grid.csv into the output directory.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, short, default_value = "out")]
        out: PathBuf,
    },
    /// Value and policy of a model checkpoint over the task grid, as CSV.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct ConfigFailure(String);

impl fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn load(common: &Common) -> Result<Experiment> {
    let setup = || -> Result<Experiment, String> {
        let text = fs::read_to_string(&common.config)
            .map_err(|e| format!("cannot read {}: {e}", common.config.display()))?;
        let config = ExperimentConfig::from_toml(&text).map_err(|e| format!("{}: {e}", common.config.display()))?;
        Experiment::new(config, common.seed).map_err(|e| e.to_string())
    };
    setup().map_err(|msg| ConfigFailure(msg).into())
}

fn load_model(path: &Path) -> Result<RlvcModel> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    RlvcModel::from_text(&text).with_context(|| format!("bad checkpoint {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_in(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    emit(Some(&dir.join(name)), text)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out, database } => {
            let exp = load(&common)?;
            if database {
                let (interactions, percepts) = exp.database_files();
                write_in(&out, "interactions.csv", &interactions)?;
                write_in(&out, "percepts.txt", &percepts)?;
            }
            let trained = exp.train()?;
            write_in(&out, "trace.csv", &trained.trace_csv)?;
            write_in(&out, "model.txt", &trained.outcome.model.to_text())?;
            eprintln!(
                "{} classes after {} iterations (converged: {})",
                trained.outcome.model.n_classes(),
                trained.outcome.trace.len(),
                trained.outcome.converged
            );
        }
        Command::Evaluate { common, model, out } => {
            let exp = load(&common)?;
            let model = load_model(&model)?;
            emit(out.as_deref(), &exp.evaluate(&model)?.to_csv())?;
        }
        Command::Baseline { common, out } => {
            let exp = load(&common)?;
            let baseline = exp.baseline()?;
            write_in(&out, "baseline_report.csv", &exp.evaluate_baseline(&baseline)?.to_csv())?;
            write_in(&out, "baseline_grid.csv", &exp.export_baseline(&baseline))?;
        }
        Command::Export { common, model, out } => {
            let exp = load(&common)?;
            let model = load_model(&model)?;
            emit(out.as_deref(), &exp.export(&model)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ConfigFailure>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
