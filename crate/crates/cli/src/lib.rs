//! Library side of the `dream` executable, so commands can be driven from
//! tests without spawning processes.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dream::synthdata::Split;
use dream::DreamError;

pub use config::RunConfig;
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "dream", version, about = "Joint contrastive and masked-diffusion training at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic split to a binary cache.
    GenData(GenDataArgs),
    /// Train from a config and write checkpoint, metrics and manifest.
    Train(TrainArgs),
    /// Decode one image for a prompt.
    Sample(SampleArgs),
    /// Decode with K candidates and keep the best-aligned one.
    SampleSad(SadArgs),
    /// Linear probe, masked retrieval curve and validation loss.
    Eval(EvalArgs),
    /// One short training run per masking schedule, compared in one CSV.
    AblateMask(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = dream::synthdata::NUM_SCENES)]
    pub count: usize,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, default_value_t = dream::synthdata::DEFAULT_SIDE)]
    pub side: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON config with dotted keys; defaults apply to anything omitted.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    /// Continue a checkpoint to the end of its own schedule.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop (and checkpoint) once this many steps are complete.
    #[arg(long)]
    pub stop_at: Option<u64>,
    /// Progress line every this many steps; 0 is silent.
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Attribute words, e.g. "red circle large TL".
    #[arg(long)]
    pub prompt: String,
    /// JSON config; only `decode.*` keys matter here.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg: Option<f64>,
    #[arg(long, value_parser = parse_cfg_schedule)]
    pub cfg_schedule: Option<dream::decoding::CfgSchedule>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub infer_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the live weights instead of the moving average.
    #[arg(long)]
    pub live: bool,
    /// Output PPM; the manifest goes next to it with a `.json` suffix.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SadArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    #[arg(long)]
    pub k: usize,
    /// Per-trajectory step budget; the switch step is derived from it.
    #[arg(long, conflicts_with = "t_switch")]
    pub budget: Option<usize>,
    #[arg(long)]
    pub t_switch: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, default_value = "0,0.25,0.5,0.75,0.9", value_parser = parse_grid)]
    pub mask_grid: Grid,
    #[arg(long, default_value_t = dream::synthdata::NUM_SCENES)]
    pub count: usize,
    /// Training-split images used to fit the linear probe; 0 skips the probe.
    #[arg(long, default_value_t = dream::synthdata::NUM_SCENES)]
    pub probe_count: usize,
    /// Seeds the evaluation masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub live: bool,
    /// Output CSV; a text summary and manifest are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Comma-separated schedule codes. FX runs with sigma 0.25 on [0.7, 1].
    #[arg(long, default_value = "WM,FX,UNI,CD")]
    pub kinds: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "0,0.9", value_parser = parse_grid)]
    pub mask_grid: Grid,
    #[arg(long, default_value_t = dream::synthdata::NUM_SCENES)]
    pub eval_count: usize,
    #[arg(long, default_value_t = 0)]
    pub log_every: u64,
}

/// Mask ratios for retrieval sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(format!("unknown split `{other}` (train, val)")),
    }
}

fn parse_cfg_schedule(s: &str) -> Result<dream::decoding::CfgSchedule, String> {
    match s {
        "constant" => Ok(dream::decoding::CfgSchedule::Constant),
        "linear" => Ok(dream::decoding::CfgSchedule::Linear),
        other => Err(format!("unknown guidance schedule `{other}` (constant, linear)")),
    }
}

pub fn parse_grid(s: &str) -> Result<Grid, String> {
    let ratios = s
        .split(',')
        .map(|p| {
            let r: f64 = p.trim().parse().map_err(|_| format!("bad mask ratio `{p}`"))?;
            if (0.0..=1.0).contains(&r) {
                Ok(r)
            } else {
                Err(format!("mask ratio {r} outside [0, 1]"))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Grid(ratios))
}

/// Process exit status for a failed command: 2 config, 3 IO, 4 numeric,
/// 5 infeasible budget, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<DreamError>() {
            return match e {
                DreamError::Config(_) | DreamError::Input(_) | DreamError::UnknownToken(_) => 2,
                DreamError::Io(_) | DreamError::Checkpoint(_) => 3,
                DreamError::Numerics(_) | DreamError::NonFiniteLoss { .. } | DreamError::NonFiniteLatent(_) => 4,
                DreamError::InfeasibleBudget(_) => 5,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a).map(drop),
        Command::Train(a) => commands::train(&a).map(drop),
        Command::Sample(a) => commands::sample(&a).map(drop),
        Command::SampleSad(a) => commands::sample_sad(&a).map(drop),
        Command::Eval(a) => commands::eval(&a).map(drop),
        Command::AblateMask(a) => commands::ablate_mask(&a).map(drop),
    }
}
