//! Command-line front end: `rodinlab <stage> --config <path> [overrides]`.
//! Every stage reads the same flat key = value config; inline `key=value`
//! arguments override the file, and the common flags override both. Exit
//! codes: 0 ok, 2 config error, 3 missing artifact, 4 numerical failure.

use clap::{Args, Parser, Subcommand};
use rodinlab::numerics::Real;
use rodinlab::pipeline::{run_stage, PipelineConfig, PipelineError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rodinlab", version, about = "Tri-plane diffusion pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the procedural multi-view dataset
    Synth(StageArgs),
    /// Fit per-subject tri-planes through a shared decoder
    Fit(StageArgs),
    /// Train the latent-conditioned base diffusion model
    TrainBase(StageArgs),
    /// Train the cascaded tri-plane upsampler
    TrainSr(StageArgs),
    /// Train the diffusion prior over portrait latents
    TrainLatentPrior(StageArgs),
    /// Sample new subjects and render orbit views
    Sample(StageArgs),
    /// Condition generation on a portrait and score the orbit
    Invert(StageArgs),
    /// Sweep plane resolution and view count on held-out views
    Eval(StageArgs),
}

impl Cmd {
    fn stage(&self) -> &'static str {
        match self {
            Cmd::Synth(_) => "synth",
            Cmd::Fit(_) => "fit",
            Cmd::TrainBase(_) => "train-base",
            Cmd::TrainSr(_) => "train-sr",
            Cmd::TrainLatentPrior(_) => "train-latent-prior",
            Cmd::Sample(_) => "sample",
            Cmd::Invert(_) => "invert",
            Cmd::Eval(_) => "eval",
        }
    }

    fn args(&self) -> &StageArgs {
        match self {
            Cmd::Synth(a)
            | Cmd::Fit(a)
            | Cmd::TrainBase(a)
            | Cmd::TrainSr(a)
            | Cmd::TrainLatentPrior(a)
            | Cmd::Sample(a)
            | Cmd::Invert(a)
            | Cmd::Eval(a) => a,
        }
    }
}

#[derive(Args)]
struct StageArgs {
    /// Flat key = value config file
    #[arg(long)]
    config: PathBuf,

    /// Inline key=value overrides, applied after the file in order
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Reverse-chain step count for sampling (0 uses base_t)
    #[arg(long)]
    steps: Option<usize>,

    /// Classifier-free guidance scale
    #[arg(long)]
    cfg_scale: Option<Real>,

    /// Run seed
    #[arg(long)]
    seed: Option<u64>,

    /// Load EMA weights (the default)
    #[arg(long)]
    ema: bool,

    /// Load raw training weights instead of EMA
    #[arg(long, conflicts_with = "ema")]
    no_ema: bool,

    /// Schedule family for the sampling chain (base|sr|latent)
    #[arg(long)]
    schedule: Option<String>,
}

fn build_config(args: &StageArgs) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::from_file(&args.config)?;
    cfg.apply_overrides(&args.overrides)?;
    if let Some(s) = args.steps {
        cfg.sample_steps = s;
    }
    if let Some(x) = args.cfg_scale {
        cfg.cfg_scale = x;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.ema {
        cfg.use_ema = true;
    }
    if args.no_ema {
        cfg.use_ema = false;
    }
    if let Some(s) = &args.schedule {
        cfg.schedule = s.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = cli.cmd.args();
    match build_config(args).and_then(|cfg| run_stage(cli.cmd.stage(), &cfg)) {
        Ok(report) => {
            println!("{}", report.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
