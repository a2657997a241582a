use std::path::PathBuf;
use std::process::ExitCode;

use cascadev_cli::commands::{cmd_eval, cmd_gen, cmd_run, cmd_train};
use cascadev_cli::config::{Overrides, RunConfig};
use cascadev_cli::CliError;
use cascadev_core::eval::ApInterpolation;
use cascadev_core::{IouKind, Weighting};
use clap::{Args, Parser, Subcommand};

/// Cascade voting detector simulator: scene generation, cascade runs,
/// evaluation and head training.
#[derive(Parser)]
#[command(name = "cascadev", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of decoder stages.
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    mu_max: Option<f64>,
    #[arg(long)]
    mu_min: Option<f64>,
    /// exp_neg_dist or literal.
    #[arg(long)]
    weighting: Option<Weighting>,
    /// rotated or aabb.
    #[arg(long)]
    iou: Option<IouKind>,
    /// continuous or 11point.
    #[arg(long)]
    ap: Option<ApInterpolation>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded synthetic scenes.
    Gen(Common),
    /// Run the cascade on generated scenes.
    Run {
        /// Directory written by `gen`.
        #[arg(long)]
        scenes: PathBuf,
        /// Model written by `train`; the oracle predictor is used otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a `run` output directory.
    Eval {
        /// Directory written by `run`.
        #[arg(long)]
        traces: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train stage heads on generated scenes.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: c.seed,
        stages: c.stages,
        mu_max: c.mu_max,
        mu_min: c.mu_min,
        weighting: c.weighting,
        iou: c.iou,
        ap: c.ap,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = resolve(&c)?;
            let files = cmd_gen(&cfg, &c.out)?;
            println!("wrote {} scenes to {}", files.len(), c.out.display());
        }
        Command::Run {
            scenes,
            model,
            common,
        } => {
            let cfg = resolve(&common)?;
            let files = cmd_run(&cfg, &scenes, model.as_deref(), &common.out)?;
            println!(
                "wrote {} traces to {}",
                files.len() / 2,
                common.out.display()
            );
        }
        Command::Eval { traces, common } => {
            let cfg = resolve(&common)?;
            let report = cmd_eval(&cfg, &traces, &common.out)?;
            for r in &report.results {
                println!("mAP@{} = {:.4}", r.iou_threshold, r.map);
            }
        }
        Command::Train { scenes, common } => {
            let cfg = resolve(&common)?;
            cmd_train(&cfg, &scenes, &common.out)?;
            println!("wrote model and loss history to {}", common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cascadev: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
