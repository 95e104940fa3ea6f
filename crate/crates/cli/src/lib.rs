//! Command-line orchestration of the benchmark: data generation through
//! report rendering, driven by one TOML configuration.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod selftest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, CliResult};
use manifest::Manifest;
use pipeline::Context;

#[derive(Debug, Parser)]
#[command(name = "nextcat", version, about = "Next merchant category prediction benchmark")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainTarget {
    Baseline,
    Lstm,
    Cnn,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate both synthetic banks.
    GenData,
    /// Clean both banks.
    Preprocess,
    /// Render instruction pairs.
    MakeInstructions,
    /// Fit a benchmark model on Bank A.
    Train {
        #[arg(value_enum)]
        model: TrainTarget,
    },
    /// Pre-train the base language model.
    PretrainLm,
    /// Fine-tune low-rank adapters on Bank A pairs.
    FinetuneLora,
    /// Evaluate every model on Bank B.
    Evaluate {
        /// Exit nonzero if a model-ordering check fails.
        #[arg(long)]
        check: bool,
    },
    /// Render report.md, report.csv and report.json.
    Report {
        #[arg(long)]
        check: bool,
    },
    /// Run every stage in order.
    RunAll {
        #[arg(long)]
        check: bool,
    },
    /// Gradient checks and oracle suites.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print the resolved configuration as TOML.
    PrintConfig,
}

/// Loads the config and applies command-line overrides.
pub fn resolve_config(args: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// What a command produced, for the exit status.
#[derive(Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    ChecksFailed,
}

fn checks(ctx: &Context, reports: &[nextcat_core::eval::MetricsReport], enabled: bool) -> Status {
    if !enabled {
        return Status::Ok;
    }
    let mut status = Status::Ok;
    for (what, ok) in pipeline::ordering_checks(reports, ctx.config.windows.train_len) {
        eprintln!("{} {what}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            status = Status::ChecksFailed;
        }
    }
    status
}

pub fn run(cli: Cli) -> CliResult<Status> {
    let cfg = resolve_config(&cli.global)?;
    let out = cfg.out_dir.clone();
    let ctx = Context::new(cfg, out.clone());
    let status = match cli.command {
        Command::Selftest { inject_fault } => {
            let mut status = Status::Ok;
            for o in selftest::run(ctx.config.seed, inject_fault)? {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                if !o.passed {
                    status = Status::ChecksFailed;
                }
            }
            return Ok(status);
        }
        Command::PrintConfig => {
            print!("{}", ctx.config.to_toml());
            return Ok(Status::Ok);
        }
        Command::GenData => {
            ctx.gen_data()?;
            Status::Ok
        }
        Command::Preprocess => {
            ctx.preprocess()?;
            Status::Ok
        }
        Command::MakeInstructions => {
            ctx.make_instructions()?;
            Status::Ok
        }
        Command::Train { model } => {
            match model {
                TrainTarget::Baseline => ctx.train_baseline()?,
                TrainTarget::Lstm => ctx.train_lstm()?,
                TrainTarget::Cnn => ctx.train_cnn()?,
            }
            Status::Ok
        }
        Command::PretrainLm => {
            ctx.pretrain_lm()?;
            Status::Ok
        }
        Command::FinetuneLora => {
            ctx.finetune_lora()?;
            Status::Ok
        }
        Command::Evaluate { check } => {
            let reports = ctx.evaluate()?;
            checks(&ctx, &reports, check)
        }
        Command::Report { check } => {
            ctx.report()?;
            checks(&ctx, &ctx.load_metrics()?, check)
        }
        Command::RunAll { check } => {
            let reports = ctx.run_all()?;
            checks(&ctx, &reports, check)
        }
    };
    let cfg_path = out.join("config.toml");
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(out.clone(), e))?;
    std::fs::write(&cfg_path, ctx.config.to_toml()).map_err(|e| CliError::Io(cfg_path, e))?;
    Manifest::build(&ctx.config, &out)?.write(&out)?;
    Ok(status)
}
