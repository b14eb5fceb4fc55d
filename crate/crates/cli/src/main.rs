//! Command-line driver: synthesize scenes, pretrain the embedding net, run
//! gradient checks, refine boxes under the re-ID loss, evaluate retrieval,
//! and reproduce the loss ablation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "boxrefine",
    about = "Re-ID driven bounding-box refinement on synthetic person-search scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Precedence: defaults, then the
/// config file, then explicit flags.
#[derive(Args)]
struct Common {
    /// Line-oriented `key = value` config file with `#` comments.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all randomness in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Loss mode supervising refinement: cls, tri, or cls+tri.
    #[arg(long, global = true)]
    loss: Option<String>,
    /// Refinement iteration count.
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Gallery-size cap for evaluation sweeps.
    #[arg(long, global = true)]
    gallery_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with annotations.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory for scene_%04d.ppm and annotations.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the embedding net on train-split ground-truth crops.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Scene directory written by `synth`.
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Optional directory for the gradcheck report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine perturbed gallery boxes under the re-ID loss.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        /// Net checkpoint written by `pretrain`.
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score retrieval (CMC / mAP) for a set of candidate boxes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        net: PathBuf,
        /// Candidate boxes CSV (scene,x1,y1,x2,y2,id).
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run baseline plus cls / tri / cls+tri refinements and tabulate.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(loss) = &common.loss {
        cfg.set("loss", loss)?;
    }
    if let Some(iters) = common.iters {
        cfg.iterations = iters;
    }
    if let Some(gs) = common.gallery_size {
        cfg.gallery_size = Some(gs);
    }
    Ok(cfg)
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Synth { common, out } => commands::cmd_synth(&resolve(&common)?, &out),
        Command::Pretrain {
            common,
            scenes,
            out,
        } => commands::cmd_pretrain(&resolve(&common)?, &scenes, &out),
        Command::Gradcheck { common, out } => {
            commands::cmd_gradcheck(&resolve(&common)?, out.as_deref())
        }
        Command::Refine {
            common,
            scenes,
            net,
            out,
        } => commands::cmd_refine(&resolve(&common)?, &scenes, &net, &out),
        Command::Eval {
            common,
            scenes,
            net,
            boxes,
            out,
        } => commands::cmd_eval(&resolve(&common)?, &scenes, &net, &boxes, &out),
        Command::Ablate { common, out } => commands::cmd_ablate(&resolve(&common)?, &out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
