//! `vinpaint`: flows, masks, training, inference and evaluation for
//! shadow-aware video object removal.
//!
//! Exit status is 0 on success, 2 for usage or data errors and 1 for
//! internal failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "vinpaint", version, about = "Shadow-aware, geometry-guided video object removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write depth-derived flows from a centre frame to its neighbours.
    Flow(FlowArgs),
    /// Propagate a base mask to every frame with random displacements.
    GenMasks(GenMasksArgs),
    /// Train the shadow detector.
    TrainShadow(TrainArgs),
    /// Train the inpainting generator and discriminator.
    TrainInpaint(TrainArgs),
    /// Remove masked objects (and their detected shadows) from a sequence.
    Infer(InferArgs),
    /// Score inpainted frames against ground truth on the hole regions.
    Evaluate(EvaluateArgs),
    /// Write a procedural fixture sequence.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    /// Dataset root holding `<seq>/image`, `depth`, `poses.txt`, `intrinsics.txt`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seq: String,
    /// Output root; flows land in `<out>/<seq>/flow/<m>_<i>.bin`.
    #[arg(long)]
    out: PathBuf,
    /// Centre frame id (default: the middle frame).
    #[arg(long)]
    center: Option<usize>,
    /// Only frames within this many ids of the centre (default: all).
    #[arg(long)]
    delta: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenMasksArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seq: String,
    /// Output root; masks land in `<out>/<seq>/mask/<id>.png`.
    #[arg(long)]
    out: PathBuf,
    /// Frame whose mask is propagated (default: the middle frame).
    #[arg(long)]
    base: Option<usize>,
    /// Maximum per-axis displacement in pixels.
    #[arg(long, default_value_t = 3.0)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoints and `train_log.jsonl` are written here.
    #[arg(long)]
    out: PathBuf,
    /// Sequences to train on (default: every sequence under `--data`).
    #[arg(long = "seq")]
    seqs: Vec<String>,
    /// Held-out sequences for IoU reporting (shadow training only).
    #[arg(long = "val-seq")]
    val_seqs: Vec<String>,
    /// Overrides `max_iters` from the config.
    #[arg(long)]
    max_iters: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, required_unless_present = "no_shadow")]
    checkpoint_shadow: Option<PathBuf>,
    #[arg(long)]
    checkpoint_inpaint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seq: String,
    /// Output root; frames land in `<out>/<seq>/image`, final holes in `<out>/<seq>/mask`.
    #[arg(long)]
    out: PathBuf,
    /// Inpaint the object masks only, without shadow detection.
    #[arg(long)]
    no_shadow: bool,
    #[arg(long, default_value_t = 0.5)]
    shadow_threshold: f64,
    /// Extra hole dilation in pixels.
    #[arg(long, default_value_t = 0)]
    dilation: i64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted `<id>.png` frames.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth frames; its ids define the evaluated set.
    #[arg(long)]
    gt: PathBuf,
    /// Directory of hole masks (0 = hole).
    #[arg(long)]
    holes: PathBuf,
    /// Flow directory with `<t+1>_<t>.bin` files, needed by `--twe`.
    #[arg(long)]
    flows: Option<PathBuf>,
    /// Also compute the temporal warping error.
    #[arg(long)]
    twe: bool,
    /// Write the predictions and difference images next to the report.
    #[arg(long)]
    emit_frames: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FixtureKind {
    /// Camera sliding over a textured plane, with a rectangular hole.
    Translation,
    /// Object with a dark shadow band, plus shadow labels and clean frames.
    Shadow,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "seq0")]
    seq: String,
    #[arg(long, value_enum, default_value = "translation")]
    kind: FixtureKind,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    /// Per-frame camera pan in pixels; frame t shows the texture offset by t times this.
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    shift_x: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    shift_y: f64,
    /// Hole rectangle `x,y,w,h` for translation fixtures.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [24, 8, 16, 16])]
    hole: Vec<usize>,
    /// Keep the hole fixed in the image instead of in the scene.
    #[arg(long)]
    screen_static: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let outcome = std::panic::catch_unwind(|| match cli.command {
        Command::Flow(a) => commands::flow(&a),
        Command::GenMasks(a) => commands::gen_masks(&a),
        Command::TrainShadow(a) => commands::train_shadow(&a),
        Command::TrainInpaint(a) => commands::train_inpaint(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Synth(a) => commands::synth(&a),
    });
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
        Err(_) => ExitCode::from(1),
    }
}
