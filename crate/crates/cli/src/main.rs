mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctalab::experiment::{Arm, ExperimentConfig, ExperimentName};
use ctalab::trainer::TrainMode;
use ctalab::Error;

use stages::{Ctx, Logger};

/// Column type annotation experiments with a toy language model.
#[derive(Debug, Parser)]
#[command(name = "ctalab", version)]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root.
    #[arg(long, env = "CTALAB_OUT", global = true)]
    out: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic corpus and its manifest.
    Generate,
    /// Instruction-tune (or reuse) the base model.
    Base,
    /// Build a fine-tuning dataset.
    Build {
        /// Training templates, e.g. `p3` or `p1,p2,p3`.
        #[arg(long, value_delimiter = ',')]
        templates: Option<Vec<String>>,
        /// Fraction of training columns to keep.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune the base model on a built dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
    },
    /// Score a checkpoint on the test split under several templates.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        templates: Option<Vec<String>>,
    },
    /// Run a named comparison over all seeds.
    Experiment {
        #[arg(value_parser = parse_experiment)]
        name: ExperimentName,
    },
}

fn parse_experiment(s: &str) -> Result<ExperimentName, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = ExperimentName::ALL.iter().map(|e| e.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn config(cli: &Cli) -> ctalab::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> ctalab::Result<()> {
    let cfg = config(&cli)?;
    let mut ctx = Ctx {
        out: cfg.output_dir.clone(),
        cfg,
        logger: Logger::new(cli.quiet),
    };
    match cli.command {
        Command::Generate => {
            stages::generate(&mut ctx)?;
        }
        Command::Base => stages::base(&mut ctx)?,
        Command::Build {
            templates,
            fraction,
            mode,
            seed,
        } => {
            let arm = Arm {
                fraction: fraction.unwrap_or(ctx.cfg.fractions[0]),
                templates: templates.unwrap_or_else(|| ctx.cfg.templates.clone()),
                mode: mode.unwrap_or(ctx.cfg.train.mode),
            };
            if !(arm.fraction > 0.0 && arm.fraction <= 1.0) {
                return Err(Error::FractionOutOfRange(arm.fraction));
            }
            for t in &arm.templates {
                ctalab::prompt::template(t)?;
            }
            let seed = seed.unwrap_or(ctx.cfg.seeds[0]);
            let path = stages::build(&mut ctx, arm, seed)?;
            println!("{}", path.display());
        }
        Command::Train { dataset, mode } => {
            let path = stages::train_stage(&mut ctx, &dataset, mode)?;
            println!("{}", path.display());
        }
        Command::Eval { checkpoint, templates } => {
            stages::eval_stage(&mut ctx, &checkpoint, templates)?;
        }
        Command::Experiment { name } => {
            stages::experiment(&mut ctx, name)?;
        }
    }
    Ok(())
}

/// 2 for errors in what the user asked for, 1 for everything the pipeline
/// itself rejected.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownTemplate(_) | Error::FractionOutOfRange(_) | Error::InvalidSpec(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
